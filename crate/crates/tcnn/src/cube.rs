//! Dense activation volumes and the binary tensor file format.
//!
//! A [`FeatureCube`] is a C×D×H×W volume (channels, temporal depth, height,
//! width) stored channel-major, then depth, then row-major spatial order:
//! index `((c*D + d)*H + y)*W + x`. Every layer consumes and produces cubes
//! in this layout, so tensors written to disk are portable across runs.
//!
//! On-disk format (`.tcnt`): magic `TCNT`, version `u8 = 1`, rank `u8`,
//! each dim as little-endian `u32`, then the values as little-endian `f32`
//! in the layout above. In memory everything is `f64`; writing rounds once.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TcnnError};

pub const TENSOR_MAGIC: &[u8; 4] = b"TCNT";
pub const TENSOR_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCube {
    channels: usize,
    depth: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureCube {
    /// Zero-filled cube. All dimensions must be at least 1.
    pub fn zeros(channels: usize, depth: usize, height: usize, width: usize) -> Self {
        assert!(
            channels >= 1 && depth >= 1 && height >= 1 && width >= 1,
            "cube dims must be >= 1, got {channels}x{depth}x{height}x{width}"
        );
        FeatureCube {
            channels,
            depth,
            height,
            width,
            data: vec![0.0; channels * depth * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        depth: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expect = channels * depth * height * width;
        if data.len() != expect {
            return Err(TcnnError::ShapeMismatch(format!(
                "cube {channels}x{depth}x{height}x{width} needs {expect} values, got {}",
                data.len()
            )));
        }
        if channels == 0 || depth == 0 || height == 0 || width == 0 {
            return Err(TcnnError::InvalidArgument(
                "cube dims must be >= 1".into(),
            ));
        }
        Ok(FeatureCube {
            channels,
            depth,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// (channels, depth, height, width)
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.depth, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, d: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && d < self.depth && y < self.height && x < self.width);
        ((c * self.depth + d) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, d: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, d, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, d: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.index(c, d, y, x);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// One H×W frame of one channel as a contiguous slice.
    pub fn frame(&self, c: usize, d: usize) -> &[f64] {
        let start = (c * self.depth + d) * self.height * self.width;
        &self.data[start..start + self.height * self.width]
    }

    /// Copies `self` into a volume zero-padded by `(pd, ph, pw)` on both
    /// sides of the depth, height and width axes.
    pub fn zero_padded(&self, pd: usize, ph: usize, pw: usize) -> FeatureCube {
        if pd == 0 && ph == 0 && pw == 0 {
            return self.clone();
        }
        let (c, d, h, w) = self.dims();
        let mut out = FeatureCube::zeros(c, d + 2 * pd, h + 2 * ph, w + 2 * pw);
        for ci in 0..c {
            for di in 0..d {
                for yi in 0..h {
                    let src = self.index(ci, di, yi, 0);
                    let dst = out.index(ci, di + pd, yi + ph, pw);
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        out
    }

    pub fn write_tcnt(&self, path: &Path) -> Result<()> {
        let dims = [
            self.channels as u32,
            self.depth as u32,
            self.height as u32,
            self.width as u32,
        ];
        write_tensor(path, &dims, &self.data)
    }

    pub fn read_tcnt(path: &Path) -> Result<FeatureCube> {
        let (dims, data) = read_tensor(path)?;
        if dims.len() != 4 {
            return Err(TcnnError::Format {
                path: path.to_path_buf(),
                msg: format!("expected rank-4 tensor, got rank {}", dims.len()),
            });
        }
        FeatureCube::from_vec(
            dims[0] as usize,
            dims[1] as usize,
            dims[2] as usize,
            dims[3] as usize,
            data,
        )
    }
}

/// Writes an arbitrary-rank tensor in the binary format, rounding values to f32.
pub fn write_tensor(path: &Path, dims: &[u32], data: &[f64]) -> Result<()> {
    let expect: usize = dims.iter().map(|&d| d as usize).product();
    if data.len() != expect {
        return Err(TcnnError::ShapeMismatch(format!(
            "tensor dims {:?} need {} values, got {}",
            dims,
            expect,
            data.len()
        )));
    }
    let io = |e| TcnnError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(TENSOR_MAGIC).map_err(io)?;
    w.write_all(&[TENSOR_VERSION, dims.len() as u8]).map_err(io)?;
    for &d in dims {
        w.write_all(&d.to_le_bytes()).map_err(io)?;
    }
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads a tensor written by [`write_tensor`], promoting values to f64.
pub fn read_tensor(path: &Path) -> Result<(Vec<u32>, Vec<f64>)> {
    let io = |e| TcnnError::io(path, e);
    let bad = |msg: &str| TcnnError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(io)?;
    if &head[0..4] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    if head[4] != TENSOR_VERSION {
        return Err(bad(&format!("unsupported version {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        dims.push(u32::from_le_bytes(b));
    }
    let n: usize = dims.iter().map(|&d| d as usize).product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(io)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io)? != 0 {
        return Err(bad("trailing bytes after tensor data"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_channel_major() {
        let mut c = FeatureCube::zeros(2, 3, 4, 5);
        *c.at_mut(1, 2, 3, 4) = 7.0;
        assert_eq!(c.data()[((1 * 3 + 2) * 4 + 3) * 5 + 4], 7.0);
        assert_eq!(c.at(1, 2, 3, 4), 7.0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(FeatureCube::from_vec(2, 2, 2, 2, vec![0.0; 15]).is_err());
    }

    #[test]
    fn zero_padding_places_values() {
        let c = FeatureCube::from_vec(1, 1, 1, 1, vec![3.0]).unwrap();
        let p = c.zero_padded(1, 1, 1);
        assert_eq!(p.dims(), (1, 3, 3, 3));
        assert_eq!(p.at(0, 1, 1, 1), 3.0);
        assert_eq!(p.data().iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn tensor_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tcnt");
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.25).collect();
        let cube = FeatureCube::from_vec(2, 3, 2, 2, data).unwrap();
        cube.write_tcnt(&path).unwrap();
        let back = FeatureCube::read_tcnt(&path).unwrap();
        assert_eq!(back, cube);

        // write -> read -> write is byte-identical
        let bytes1 = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("t2.tcnt");
        back.write_tcnt(&path2).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn read_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.tcnt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_tensor(&path).is_err());
    }
}
