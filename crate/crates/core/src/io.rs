//! File helpers: atomic writes, PGM masks and heatmaps, PNG frames.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// reader never sees a partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Binary (P5) 8-bit PGM.
pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(Error::shape(format!(
            "pgm buffer of {} bytes for {width}x{height}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(data.len() + 20);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(data, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| image_err(Path::new("<pgm>"), e))?;
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    atomic_write(path, &encode_pgm(width, height, data)?)
}

/// Reads a grayscale image (PGM or PNG). Colour images are rejected.
/// Returns `(width, height, pixels)` with 16-bit input scaled to 8 bits.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    match img.color() {
        ColorType::L8 | ColorType::L16 => {}
        other => {
            return Err(Error::InvalidInput(format!(
                "{}: expected a grayscale image, found {other:?}",
                path.display()
            )))
        }
    }
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    Ok((w as usize, h as usize, gray.into_raw()))
}

/// Interleaved 8-bit RGB to PNG bytes.
pub fn encode_png_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::shape(format!(
            "rgb buffer of {} bytes for {width}x{height}",
            rgb.len()
        )));
    }
    let mut out = Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut out,
        rgb,
        width as u32,
        height as u32,
        ExtendedColorType::Rgb8,
        ImageFormat::Png,
    )
    .map_err(|e| image_err(Path::new("<png>"), e))?;
    Ok(out.into_inner())
}

pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    atomic_write(path, &encode_png_rgb(width, height, rgb)?)
}

/// Reads any supported image as interleaved 8-bit RGB.
pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

/// Sorted regular files in `dir` with the given extension.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file()
            && path
                .extension()
                .is_some_and(|x| x.eq_ignore_ascii_case(ext))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let data: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_pgm(&path, 4, 3, &data).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(read_gray(&path).unwrap(), (4, 3, data));
    }

    #[test]
    fn png_roundtrip_and_color_rejected_as_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        write_png_rgb(&path, 3, 2, &rgb).unwrap();
        assert_eq!(read_rgb(&path).unwrap(), (3, 2, rgb));
        assert!(matches!(read_gray(&path), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.bin");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }

    #[test]
    fn buffer_size_checked() {
        assert!(encode_pgm(3, 3, &[0; 8]).is_err());
        assert!(encode_png_rgb(2, 2, &[0; 11]).is_err());
    }
}
