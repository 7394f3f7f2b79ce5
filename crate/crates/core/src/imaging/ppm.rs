//! Binary portable pixmap (P6) reader and writer.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::ImagePlane;
use crate::error::{Error, Result};

/// Parse a P6 file body. Header comments (`# ...`) are accepted; maxval must be 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImagePlane> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Image("non-ascii header".into()))?);
    }
    if fields[0] != "P6" {
        return Err(Error::Image(format!("unsupported magic `{}`", fields[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::Image(format!("bad {what} `{s}`")))
    };
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::Image(format!("only 8-bit maxval 255 supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Image("zero-sized image".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Image("missing raster".into()));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Image(format!(
            "truncated raster: need {need} bytes, got {}",
            raster.len()
        )));
    }
    ImagePlane::from_bytes(height, width, &raster[..need])
}

pub fn encode_ppm(image: &ImagePlane) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_bytes());
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    decode_ppm(&fs::read(path)?)
}

/// Write atomically (temp file + rename).
pub fn save_image(image: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_ppm(image))
}

/// Write via a temporary sibling file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
