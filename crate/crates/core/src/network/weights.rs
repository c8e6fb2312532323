//! Binary weight files.
//!
//! Layout, all integers `u32` and all values `f32`, little-endian:
//!
//! ```text
//! "DCSY" version input_size classes anchors scale_num scale_den conv_count
//! per conv, in graph order:
//!     [bn_gamma, bn_beta, bn_mean, bn_var]   (out_c each, only if the conv has BN)
//!     bias                                   (out_c)
//!     weights                                (out_c · in_c · k · k)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Float;

use super::{Network, NetworkConfig};

pub const WEIGHT_MAGIC: &[u8; 4] = b"DCSY";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 7 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightHeader {
    pub version: u32,
    pub input_size: u32,
    pub num_classes: u32,
    pub num_anchors: u32,
    pub scale_num: u32,
    pub scale_den: u32,
    pub conv_count: u32,
}

impl WeightHeader {
    fn for_network<T: Float>(net: &Network<T>) -> Self {
        let cfg = net.config();
        WeightHeader {
            version: WEIGHT_FORMAT_VERSION,
            input_size: cfg.input_size as u32,
            num_classes: cfg.num_classes as u32,
            num_anchors: cfg.num_anchors() as u32,
            scale_num: cfg.channel_scale.0,
            scale_den: cfg.channel_scale.1,
            conv_count: net.conv_blocks().count() as u32,
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "weight file truncated: {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..4] != WEIGHT_MAGIC {
            return Err(Error::Format(format!(
                "bad weight file magic {:?}, expected \"DCSY\"",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let f = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let h = WeightHeader {
            version: f(0),
            input_size: f(1),
            num_classes: f(2),
            num_anchors: f(3),
            scale_num: f(4),
            scale_den: f(5),
            conv_count: f(6),
        };
        if h.version != WEIGHT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported weight format version {}, expected {WEIGHT_FORMAT_VERSION}",
                h.version
            )));
        }
        Ok(h)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    /// Network configuration implied by the header; anchors are not stored in
    /// weight files and must be supplied.
    pub fn config(&self, anchors: Vec<crate::anchors::Anchor>) -> Result<NetworkConfig> {
        if anchors.len() != self.num_anchors as usize {
            return Err(Error::Config(format!(
                "weight file expects {} anchors, got {}",
                self.num_anchors,
                anchors.len()
            )));
        }
        Ok(NetworkConfig::new(self.input_size as usize, self.num_classes as usize, anchors)
            .with_channel_scale(self.scale_num, self.scale_den))
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(WEIGHT_MAGIC);
        for v in [
            self.version,
            self.input_size,
            self.num_classes,
            self.num_anchors,
            self.scale_num,
            self.scale_den,
            self.conv_count,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl<T: Float> Network<T> {
    /// Stored value count: parameters plus BN running statistics.
    pub fn stored_value_count(&self) -> usize {
        self.conv_blocks()
            .map(|c| c.conv.weight.len() + c.conv.bias.len() + c.bn.as_ref().map_or(0, |b| 4 * b.channels()))
            .sum()
    }

    pub fn weights_to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.stored_value_count());
        WeightHeader::for_network(self).write(&mut out);
        let mut put = |vals: &[T]| {
            for v in vals {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        };
        for c in self.conv_blocks() {
            if let Some(bn) = &c.bn {
                put(&bn.gamma);
                put(&bn.beta);
                put(&bn.running_mean);
                put(&bn.running_var);
            }
            put(&c.conv.bias);
            put(c.conv.weight.data());
        }
        out
    }

    pub fn load_weights_from_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let header = WeightHeader::parse(bytes)?;
        let expected = WeightHeader::for_network(self);
        let payload = &bytes[HEADER_LEN..];
        let want = self.stored_value_count();
        let found = payload.len() / 4;
        for (field, e, f) in [
            ("input_size", expected.input_size, header.input_size),
            ("classes", expected.num_classes, header.num_classes),
            ("anchors", expected.num_anchors, header.num_anchors),
            ("scale_num", expected.scale_num, header.scale_num),
            ("scale_den", expected.scale_den, header.scale_den),
            ("conv_count", expected.conv_count, header.conv_count),
        ] {
            if e != f {
                return Err(Error::Format(format!(
                    "weight file config mismatch: expected {field}={e} ({want} parameters), found {field}={f} ({found} parameters)"
                )));
            }
        }
        if !payload.len().is_multiple_of(4) || found != want {
            return Err(Error::Format(format!(
                "weight file size mismatch: expected {want} parameters, found {} bytes of payload",
                payload.len()
            )));
        }
        let mut vals = payload.chunks_exact(4).map(|b| T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64));
        let mut take = |dst: &mut [T]| {
            for d in dst {
                *d = vals.next().expect("length checked");
            }
        };
        for c in self.conv_blocks_mut() {
            if let Some(bn) = &mut c.bn {
                take(&mut bn.gamma);
                take(&mut bn.beta);
                take(&mut bn.running_mean);
                take(&mut bn.running_var);
            }
            take(&mut c.conv.bias);
            take(c.conv.weight.data_mut());
        }
        self.clear_cache();
        Ok(())
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.weights_to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_weights_from_bytes(&bytes)
    }
}
