//! Raw float64 artifacts.
//!
//! Tensor file: 16-byte header `b"SMT1"`, then `channels`, `height`, `width`
//! as little-endian `u32`, followed by `channels·height·width` little-endian
//! `f64` values in row-major channel-plane order.
//!
//! Parameter file: 16-byte header `b"SMP1"`, then `count`, `steps` and a zero
//! `u32`, followed by `count` little-endian `f64` values.

use std::path::Path;

use crate::diffusion::ToyDenoiser;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::tensor::ImageTensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"SMT1";
pub const PARAMS_MAGIC: [u8; 4] = *b"SMP1";
const HEADER_LEN: usize = 16;

fn header(magic: [u8; 4], fields: [u32; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&magic);
    for f in fields {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

pub fn encode_tensor(img: &ImageTensor) -> Result<Vec<u8>> {
    let mut out = header(
        TENSOR_MAGIC,
        [
            to_u32(img.channels(), "channels")?,
            to_u32(img.height(), "height")?,
            to_u32(img.width(), "width")?,
        ],
    );
    out.reserve(img.data().len() * 8);
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn parse(bytes: &[u8], magic: [u8; 4], path: &Path) -> Result<([u32; 3], Vec<f64>)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != magic {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let fields = [field(0), field(1), field(2)];
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(8) {
        return Err(bad("payload is not a whole number of f64 values".into()));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((fields, values))
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<ImageTensor> {
    let ([c, h, w], values) = parse(bytes, TENSOR_MAGIC, path)?;
    let expected = c as usize * h as usize * w as usize;
    if values.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("header says {c}x{h}x{w} but payload has {} values", values.len()),
        });
    }
    ImageTensor::new(c as usize, h as usize, w as usize, values)
}

pub fn save_tensor(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_tensor(img)?)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

pub fn encode_params(den: &ToyDenoiser) -> Result<Vec<u8>> {
    use crate::diffusion::Denoiser;
    let params = den.params();
    let mut out = header(
        PARAMS_MAGIC,
        [
            to_u32(params.len(), "parameter count")?,
            to_u32(den.steps(), "steps")?,
            0,
        ],
    );
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ToyDenoiser> {
    let ([count, steps, _], values) = parse(bytes, PARAMS_MAGIC, path)?;
    if values.len() != count as usize {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("header says {count} parameters but payload has {}", values.len()),
        });
    }
    ToyDenoiser::with_params(steps as usize, values)
}

pub fn save_params(den: &ToyDenoiser, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_params(den)?)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ToyDenoiser> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::TOY_PARAMS;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let img = ImageTensor::new(1, 1, 2, vec![1.5, -2.0]).unwrap();
        let bytes = encode_tensor(&img).unwrap();
        assert_eq!(&bytes[..4], b"SMT1");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(&bytes[16..24], &1.5f64.to_le_bytes());
    }

    #[test]
    fn malformed_inputs() {
        let p = Path::new("x");
        assert!(decode_tensor(b"SMT1", p).is_err());
        let img = ImageTensor::zeros(1, 2, 2).unwrap();
        let mut bytes = encode_tensor(&img).unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(decode_tensor(&bytes, p).is_err());
        bytes[0] = b'X';
        assert!(decode_tensor(&bytes, p).is_err());
        assert!(decode_params(&encode_tensor(&img).unwrap(), p).is_err());
    }

    proptest! {
        #[test]
        fn tensor_and_params_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 3 * 2 * 7), steps in 1usize..40) {
            let img = ImageTensor::new(3, 2, 7, vals.clone()).unwrap();
            let back = decode_tensor(&encode_tensor(&img).unwrap(), Path::new("t")).unwrap();
            prop_assert_eq!(back, img);

            let den = ToyDenoiser::with_params(steps, vals[..TOY_PARAMS].to_vec()).unwrap();
            let back = decode_params(&encode_params(&den).unwrap(), Path::new("p")).unwrap();
            prop_assert_eq!(back, den);
        }
    }
}
