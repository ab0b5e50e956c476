//! On-disk image exchange.
//!
//! Tensor files: magic `STNSR1`, `u32` rank, `rank` x `u32` dims, then the
//! row-major little-endian `f32` payload. Images are stored with dims
//! `[height, width]`; masks as 0.0/1.0 tensors. PGM export is 8-bit `P5`
//! with `round(clamp(v, 0, 1) * 255)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imgrid::{BinaryMask, Image2D};

pub const TENSOR_MAGIC: &[u8; 6] = b"STNSR1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_image(img: &Image2D) -> Self {
        Self {
            dims: vec![img.height(), img.width()],
            data: img.data().to_vec(),
        }
    }

    pub fn into_image(self) -> Result<Image2D> {
        match self.dims[..] {
            [h, w] => Image2D::new(w, h, self.data),
            _ => Err(Error::format(
                "tensor",
                format!("expected a rank-2 image tensor, got dims {:?}", self.dims),
            )),
        }
    }
}

pub fn encode_tensor(out: &mut Vec<u8>, tensor: &Tensor) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte buffer that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], context: &'a str) -> Self {
        Self {
            buf,
            pos: 0,
            context,
        }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.context,
                format!("truncated: wanted {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn tensor(&mut self) -> Result<Tensor> {
        let magic = self.take(TENSOR_MAGIC.len())?;
        if magic != TENSOR_MAGIC {
            return Err(Error::format(
                self.context,
                format!("bad tensor magic, expected {:?}", std::str::from_utf8(TENSOR_MAGIC).unwrap()),
            ));
        }
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::format(self.context, format!("implausible tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(self.context, "tensor size overflows"))?;
        let bytes = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::format(self.context, "tensor size overflows"))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { dims, data })
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "tensor");
    let t = r.tensor()?;
    if !r.at_end() {
        return Err(Error::format("tensor", "trailing bytes after payload"));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + tensor.data.len() * 4);
    encode_tensor(&mut buf, tensor);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format { reason, .. } => Error::format(path.display().to_string(), reason),
        other => other,
    })
}

pub fn write_image(path: &Path, img: &Image2D) -> Result<()> {
    write_tensor(path, &Tensor::from_image(img))
}

pub fn read_image(path: &Path) -> Result<Image2D> {
    read_tensor(path)?.into_image()
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_image(path, &mask.to_image())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    BinaryMask::from_image(&read_image(path)?)
}

pub fn encode_pgm(img: &Image2D) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(path: &Path, img: &Image2D) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(img)).map_err(|e| Error::io(path, e))
}
