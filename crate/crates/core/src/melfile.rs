//! Binary mel container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 8     | magic `PVMEL\0\0\x01`           |
//! | 4     | frames (u32)                    |
//! | 4     | bins (u32)                      |
//! | 4     | hop in samples (u32)            |
//! | 4     | sample rate in Hz (u32)         |
//! | 8·F·B | values, row-major f64           |

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PVMEL\0\0\x01";

pub fn write_mel<W: Write>(mel: &MelSpectrogram, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    for v in [mel.frames(), mel.bins(), mel.hop, mel.sample_rate as usize] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for v in mel.values.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mel<R: Read>(mut r: R) -> Result<MelSpectrogram> {
    let bad = |what: &str| Error::invalid(format!("mel file: {what}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut header = [0u32; 4];
    for h in &mut header {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        *h = u32::from_le_bytes(b);
    }
    let [frames, bins, hop, sample_rate] = header.map(|v| v as usize);
    let mut data = vec![0u8; frames * bins * 8];
    r.read_exact(&mut data).map_err(|_| bad("truncated values"))?;
    let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let values = Array2::from_shape_vec((frames, bins), values).map_err(|e| bad(&e.to_string()))?;
    Ok(MelSpectrogram::new(values, hop, sample_rate as u32))
}

pub fn save_mel(mel: &MelSpectrogram, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_mel(mel, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_mel(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_mel(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let values = Array2::from_shape_fn((3, 4), |(i, j)| i as f64 - 0.25 * j as f64);
        let mel = MelSpectrogram::new(values, 320, 16_000);
        let mut buf = Vec::new();
        write_mel(&mel, &mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 3 * 4 * 8);
        let back = read_mel(buf.as_slice()).unwrap();
        assert_eq!(back.values, mel.values);
        assert_eq!((back.hop, back.sample_rate), (320, 16_000));
        assert!(read_mel(&buf[..30]).is_err());
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(read_mel(corrupt.as_slice()).is_err());
    }
}
