//! Image input: binary PPM (P6, maxval 255) or a raw HWC blob whose first
//! line is `RAWHWC <height> <width> <channels>`.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};

use semistream_core::model::{Dims, QTensor, QuantParams};

pub const RAW_MAGIC: &str = "RAWHWC";

/// Splits off the next whitespace-delimited header token, skipping `#`
/// comments.
fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    ensure!(start < *pos, "PPM header ends early");
    Ok(&bytes[start..*pos])
}

fn number(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)?.parse().with_context(|| format!("bad header number {:?}", String::from_utf8_lossy(tok)))
}

/// Decodes an image file into `(dims, pixels)`.
pub fn decode_image(bytes: &[u8]) -> Result<(Dims, Vec<u8>)> {
    if bytes.starts_with(b"P6") {
        let mut pos = 2;
        let width = number(ppm_token(bytes, &mut pos)?)?;
        let height = number(ppm_token(bytes, &mut pos)?)?;
        let maxval = number(ppm_token(bytes, &mut pos)?)?;
        ensure!(maxval == 255, "only 8-bit PPM is supported (maxval {maxval})");
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let dims = Dims::new(height, width, 3);
        let data = bytes.get(pos..).unwrap_or_default();
        ensure!(data.len() == dims.len(), "PPM raster has {} bytes, {dims} needs {}", data.len(), dims.len());
        return Ok((dims, data.to_vec()));
    }
    if bytes.starts_with(RAW_MAGIC.as_bytes()) {
        let end = bytes.iter().position(|&b| b == b'\n').context("raw header has no newline")?;
        let header = std::str::from_utf8(&bytes[..end])?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        ensure!(fields.len() == 4, "raw header must be `{RAW_MAGIC} <height> <width> <channels>`");
        let dims = Dims::new(fields[1].parse()?, fields[2].parse()?, fields[3].parse()?);
        let data = &bytes[end + 1..];
        ensure!(data.len() == dims.len(), "raw blob has {} bytes, {dims} needs {}", data.len(), dims.len());
        return Ok((dims, data.to_vec()));
    }
    bail!("unrecognised image format (expected P6 PPM or {RAW_MAGIC} header)")
}

/// Reads an image and attaches the model's input quantization.
pub fn read_image(path: &Path, quant: QuantParams) -> Result<QTensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (dims, data) = decode_image(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    Ok(QTensor::new(dims, data, quant)?)
}

pub fn encode_ppm(t: &QTensor) -> Result<Vec<u8>> {
    ensure!(t.channels == 3, "PPM needs 3 channels, tensor has {}", t.channels);
    let mut out = format!("P6\n{} {}\n255\n", t.width, t.height).into_bytes();
    out.extend_from_slice(&t.data);
    Ok(out)
}

pub fn encode_raw(t: &QTensor) -> Vec<u8> {
    let mut out = format!("{RAW_MAGIC} {} {} {}\n", t.height, t.width, t.channels).into_bytes();
    out.extend_from_slice(&t.data);
    out
}
