//! Tactile signals and the `VTS1` binary container.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VTS1"
//! 4       4     u32 channel count
//! 8       4     u32 samples per channel
//! 12      4     u32 sample rate in millihertz
//! 16      ...   f32 samples, channel-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

pub const VTS_MAGIC: [u8; 4] = *b"VTS1";

#[derive(Debug, Error)]
pub enum SignalFormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected \"VTS1\"")]
    BadMagic([u8; 4]),
    #[error("invalid signal: {0}")]
    Invalid(String),
}

/// A fixed-length vibration sequence, one `Vec` per accelerometer channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileSignal {
    pub sample_rate_hz: f64,
    pub channels: Vec<Vec<f64>>,
}

impl TactileSignal {
    pub fn mono(sample_rate_hz: f64, data: Vec<f64>) -> Self {
        Self {
            sample_rate_hz,
            channels: vec![data],
        }
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, idx: usize) -> &[f64] {
        &self.channels[idx]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            sample_rate_hz: self.sample_rate_hz,
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|&x| f(x)).collect())
                .collect(),
        }
    }

    pub fn select_channels(&self, indices: &[usize]) -> Result<Self, SignalFormatError> {
        let mut channels = Vec::with_capacity(indices.len());
        for &i in indices {
            let ch = self.channels.get(i).ok_or_else(|| {
                SignalFormatError::Invalid(format!(
                    "channel {i} requested but signal has {} channels",
                    self.channels.len()
                ))
            })?;
            channels.push(ch.clone());
        }
        Ok(Self {
            sample_rate_hz: self.sample_rate_hz,
            channels,
        })
    }
}

pub fn write_vts<W: Write>(
    mut w: W,
    sample_rate_hz: f64,
    channels: &[Vec<f64>],
) -> Result<(), SignalFormatError> {
    let n = channels.first().map_or(0, Vec::len);
    if channels.iter().any(|c| c.len() != n) {
        return Err(SignalFormatError::Invalid("channels differ in length".into()));
    }
    if !(sample_rate_hz > 0.0) {
        return Err(SignalFormatError::Invalid(format!(
            "sample rate must be positive, got {sample_rate_hz}"
        )));
    }
    w.write_all(&VTS_MAGIC)?;
    w.write_u32::<LittleEndian>(channels.len() as u32)?;
    w.write_u32::<LittleEndian>(n as u32)?;
    w.write_u32::<LittleEndian>((sample_rate_hz * 1000.0).round() as u32)?;
    for ch in channels {
        for &x in ch {
            w.write_f32::<LittleEndian>(x as f32)?;
        }
    }
    Ok(())
}

/// Raw decoded file: sample rate plus f32 channel data exactly as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct VtsData {
    pub sample_rate_mhz: u32,
    pub channels: Vec<Vec<f32>>,
}

impl VtsData {
    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_mhz as f64 / 1000.0
    }

    pub fn into_signal(self) -> TactileSignal {
        TactileSignal {
            sample_rate_hz: self.sample_rate_hz(),
            channels: self
                .channels
                .into_iter()
                .map(|c| c.into_iter().map(f64::from).collect())
                .collect(),
        }
    }
}

pub fn read_vts<R: Read>(mut r: R) -> Result<VtsData, SignalFormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != VTS_MAGIC {
        return Err(SignalFormatError::BadMagic(magic));
    }
    let n_channels = r.read_u32::<LittleEndian>()? as usize;
    let n_samples = r.read_u32::<LittleEndian>()? as usize;
    let sample_rate_mhz = r.read_u32::<LittleEndian>()?;
    let mut channels = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        let mut ch = vec![0f32; n_samples];
        r.read_f32_into::<LittleEndian>(&mut ch)?;
        channels.push(ch);
    }
    Ok(VtsData {
        sample_rate_mhz,
        channels,
    })
}

pub fn save_signal(path: &Path, signal: &TactileSignal) -> Result<(), SignalFormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_vts(&mut w, signal.sample_rate_hz, &signal.channels)?;
    w.flush()?;
    Ok(())
}

pub fn load_signal(path: &Path) -> Result<TactileSignal, SignalFormatError> {
    let r = BufReader::new(File::open(path)?);
    Ok(read_vts(r)?.into_signal())
}
