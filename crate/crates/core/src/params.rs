//! Trained-weight bundles: a JSON manifest plus a flat little-endian f32 blob.
//!
//! The manifest maps array names to a shape and a byte offset into the blob,
//! `{"data": "w.bin", "arrays": {"adapter.conv.weight": {"shape": [8,1,1,1,1], "offset": 0}}}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AdapterParams, ChannelAttentionParams, BN_EPS};
use crate::conv::Conv3dParams;
use crate::error::{shape_err, Error, Result};
use crate::uncertainty::RefinerParams;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub shape: Vec<usize>,
    /// Byte offset into the data blob.
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Blob file name relative to the manifest.
    #[serde(default)]
    pub data: Option<String>,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightsBundle {
    pub manifest: Manifest,
    pub blob: Vec<f32>,
}

impl WeightsBundle {
    pub fn insert(&mut self, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
        if shape.iter().product::<usize>() != values.len() {
            return shape_err(format!("{name}: {} values for shape {shape:?}", values.len()));
        }
        let offset = self.blob.len() * 4;
        self.blob.extend_from_slice(values);
        self.manifest.arrays.insert(name.to_string(), ArrayEntry { shape: shape.to_vec(), offset });
        Ok(())
    }

    /// Values of `name`, checking the shape when `expect` is given.
    pub fn get(&self, name: &str, expect: Option<&[usize]>) -> Result<&[f32]> {
        let e = self
            .manifest
            .arrays
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("weights bundle lacks {name}")))?;
        if let Some(s) = expect {
            if e.shape != s {
                return shape_err(format!("{name} has shape {:?}, expected {s:?}", e.shape));
            }
        }
        if e.offset % 4 != 0 {
            return shape_err(format!("{name} offset {} is not 4-byte aligned", e.offset));
        }
        let start = e.offset / 4;
        let end = start + e.shape.iter().product::<usize>();
        self.blob
            .get(start..end)
            .ok_or_else(|| Error::Shape(format!("{name} runs past the end of the data blob")))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        self.manifest
            .arrays
            .get(name)
            .map(|e| e.shape.as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("weights bundle lacks {name}")))
    }

    fn blob_path(manifest_path: &Path, m: &Manifest) -> PathBuf {
        match &m.data {
            Some(d) => manifest_path.with_file_name(d),
            None => manifest_path.with_extension("bin"),
        }
    }

    pub fn read(manifest_path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
        let bytes = fs::read(Self::blob_path(manifest_path, &manifest))?;
        if bytes.len() % 4 != 0 {
            return shape_err("weights blob length is not a multiple of 4");
        }
        let blob = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Ok(Self { manifest, blob })
    }

    /// Writes the manifest and a sibling `.bin` blob.
    pub fn write(&self, manifest_path: &Path) -> Result<()> {
        let mut m = self.manifest.clone();
        let blob_path = manifest_path.with_extension("bin");
        m.data = blob_path.file_name().map(|n| n.to_string_lossy().into_owned());
        let bytes: Vec<u8> = self.blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&blob_path, bytes)?;
        fs::write(manifest_path, serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }

    fn conv(&self, prefix: &str) -> Result<Conv3dParams> {
        let s = self.shape(&format!("{prefix}.weight"))?.to_vec();
        if s.len() != 5 || s[2] != s[3] || s[3] != s[4] {
            return shape_err(format!("{prefix}.weight must be [c_out, c_in, k, k, k], got {s:?}"));
        }
        let w = self.get(&format!("{prefix}.weight"), None)?.to_vec();
        let b = self.get(&format!("{prefix}.bias"), Some(&[s[0]]))?.to_vec();
        Conv3dParams::new(s[0], s[1], s[2], w, b)
    }

    fn put_conv(&mut self, prefix: &str, c: &Conv3dParams) -> Result<()> {
        let k = c.kernel;
        self.insert(&format!("{prefix}.weight"), &[c.c_out, c.c_in, k, k, k], &c.weights)?;
        self.insert(&format!("{prefix}.bias"), &[c.c_out], &c.bias)
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.get(name, Some(&[1]))?[0] as f64)
    }

    pub fn adapter(&self) -> Result<AdapterParams> {
        let conv = self.conv("adapter.conv")?;
        let c = conv.c_out;
        let v = |n: &str| self.get(n, Some(&[c])).map(<[f32]>::to_vec);
        let p = AdapterParams {
            gamma: self.scalar("adapter.gamma")?,
            beta: self.scalar("adapter.beta")?,
            bn_mean: v("adapter.bn.mean")?,
            bn_var: v("adapter.bn.var")?,
            bn_gamma: v("adapter.bn.gamma")?,
            bn_beta: v("adapter.bn.beta")?,
            bn_eps: if self.manifest.arrays.contains_key("adapter.bn.eps") { self.scalar("adapter.bn.eps")? } else { BN_EPS },
            conv,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channel_attention(&self) -> Result<ChannelAttentionParams> {
        let s = self.shape("channel.w1")?.to_vec();
        if s.len() != 2 {
            return shape_err("channel.w1 must be [hidden, channels]");
        }
        let (h, c) = (s[0], s[1]);
        let p = ChannelAttentionParams {
            channels: c,
            hidden: h,
            w1: self.get("channel.w1", None)?.to_vec(),
            b1: self.get("channel.b1", Some(&[h]))?.to_vec(),
            w2: self.get("channel.w2", Some(&[c, h]))?.to_vec(),
            b2: self.get("channel.b2", Some(&[c]))?.to_vec(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn refiner(&self) -> Result<RefinerParams> {
        RefinerParams::new(
            self.conv("refiner.conv1")?,
            self.conv("refiner.conv2")?,
            self.conv("refiner.conv3")?,
            self.scalar("refiner.alpha")?,
        )
    }

    pub fn put_adapter(&mut self, p: &AdapterParams) -> Result<()> {
        let c = p.channels();
        self.insert("adapter.gamma", &[1], &[p.gamma as f32])?;
        self.insert("adapter.beta", &[1], &[p.beta as f32])?;
        self.put_conv("adapter.conv", &p.conv)?;
        self.insert("adapter.bn.mean", &[c], &p.bn_mean)?;
        self.insert("adapter.bn.var", &[c], &p.bn_var)?;
        self.insert("adapter.bn.gamma", &[c], &p.bn_gamma)?;
        self.insert("adapter.bn.beta", &[c], &p.bn_beta)?;
        self.insert("adapter.bn.eps", &[1], &[p.bn_eps as f32])
    }

    pub fn put_channel_attention(&mut self, p: &ChannelAttentionParams) -> Result<()> {
        self.insert("channel.w1", &[p.hidden, p.channels], &p.w1)?;
        self.insert("channel.b1", &[p.hidden], &p.b1)?;
        self.insert("channel.w2", &[p.channels, p.hidden], &p.w2)?;
        self.insert("channel.b2", &[p.channels], &p.b2)
    }

    pub fn put_refiner(&mut self, p: &RefinerParams) -> Result<()> {
        self.put_conv("refiner.conv1", &p.conv1)?;
        self.put_conv("refiner.conv2", &p.conv2)?;
        self.put_conv("refiner.conv3", &p.conv3)?;
        self.insert("refiner.alpha", &[1], &[p.alpha as f32])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let mut b = WeightsBundle::default();
        let mut conv = Conv3dParams::zeros(3, 1, 1);
        conv.weights = vec![1.0, -2.0, 0.5];
        let ap = AdapterParams::with_conv(conv);
        let mut cp = ChannelAttentionParams::zeros(4, 2);
        cp.w1[3] = 0.25;
        let rp = RefinerParams::zeros(4, 2);
        b.put_adapter(&ap).unwrap();
        b.put_channel_attention(&cp).unwrap();
        b.put_refiner(&rp).unwrap();
        b.write(&path).unwrap();
        let r = WeightsBundle::read(&path).unwrap();
        assert_eq!(r.adapter().unwrap(), ap);
        assert_eq!(r.channel_attention().unwrap(), cp);
        assert_eq!(r.refiner().unwrap(), rp);
        assert!(r.get("channel.b2", Some(&[5])).is_err());
        assert!(r.get("missing", None).is_err());
    }
}
