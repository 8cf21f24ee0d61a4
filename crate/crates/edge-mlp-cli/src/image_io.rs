//! Single-image input: raw 784-byte dumps or portable graymaps (P5/P2),
//! 28x28 only, returned as row-major intensities in `[0, 1]`.

use std::path::Path;

use edge_mlp::dataset::{IMAGE_PIXELS, IMAGE_SIDE};
use edge_mlp::error::{Error, Result};

pub fn read_image(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        parse_pgm(&bytes)
    } else if bytes.len() == IMAGE_PIXELS {
        Ok(bytes.iter().map(|&b| b as f32 / 255.0).collect())
    } else {
        Err(Error::BadImageShape {
            expected: format!("{IMAGE_PIXELS}-byte raw image or 28x28 PGM"),
            got: format!("{} bytes", bytes.len()),
        })
    }
}

/// PGM tokens: magic, width, height, maxval, then pixel data. `#` starts a
/// comment running to end of line.
fn parse_pgm(bytes: &[u8]) -> Result<Vec<f32>> {
    let binary = bytes.starts_with(b"P5");
    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in header.iter_mut() {
        *slot = next_token(bytes, &mut pos)?;
    }
    let [width, height, maxval] = header;
    if width != IMAGE_SIDE || height != IMAGE_SIDE {
        return Err(Error::BadImageShape {
            expected: format!("{IMAGE_SIDE}x{IMAGE_SIDE}"),
            got: format!("{width}x{height}"),
        });
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::BadImageShape {
            expected: "maxval in 1..=255".into(),
            got: format!("maxval {maxval}"),
        });
    }

    let mut pixels = Vec::with_capacity(IMAGE_PIXELS);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if bytes.len() < pos + IMAGE_PIXELS {
            return Err(Error::BadImageShape {
                expected: format!("{IMAGE_PIXELS} raster bytes"),
                got: format!("{}", bytes.len().saturating_sub(pos)),
            });
        }
        for &b in &bytes[pos..pos + IMAGE_PIXELS] {
            pixels.push(b as f32 / maxval as f32);
        }
    } else {
        for _ in 0..IMAGE_PIXELS {
            let v = next_token(bytes, &mut pos)?;
            if v > maxval {
                return Err(Error::BadImageShape {
                    expected: format!("pixel <= {maxval}"),
                    got: format!("{v}"),
                });
            }
            pixels.push(v as f32 / maxval as f32);
        }
    }
    Ok(pixels)
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // skip whitespace and comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::BadImageShape {
            expected: "PGM integer token".into(),
            got: "end of header".into(),
        });
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::BadImageShape {
            expected: "PGM integer token".into(),
            got: "unparseable".into(),
        })
}
