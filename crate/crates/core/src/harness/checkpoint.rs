use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::Config;
use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"GOLO";
pub const VERSION: u32 = 1;

const PARAM: &str = "param.";
const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";
const STEP: &str = "meta.step";
const CONFIG: &str = "meta.config";

/// Named `f32` arrays in file order.
pub fn write_entries(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in t.data() {
            buf.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_entries(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    while !r.is_empty() {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len.min(r.len() + 1)];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(4) > r.len() {
            return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("entry `{name}` is truncated")).into());
        }
        let data = (0..numel).map(|_| read_u32(&mut r).map(f32::from_bits)).collect::<Result<Vec<_>>>()?;
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

/// Parameters, optimizer moments, step counter and the config they were
/// trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(3 * self.params.len() + 2);
        let text = self.config.to_toml();
        out.push((
            CONFIG.to_string(),
            Tensor::new([text.len()], text.bytes().map(f32::from).collect()).expect("1-d"),
        ));
        let step = [self.step as u32, (self.step >> 32) as u32].map(f32::from_bits);
        out.push((STEP.to_string(), Tensor::new([2], step.to_vec()).expect("1-d")));
        for (id, name, v) in self.params.iter() {
            out.push((format!("{PARAM}{name}"), v.clone()));
            out.push((format!("{MOMENT1}{name}"), self.adam.m[id.index()].clone()));
            out.push((format!("{MOMENT2}{name}"), self.adam.v[id.index()].clone()));
        }
        out
    }

    pub fn from_entries(entries: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let find = |key: &str| {
            entries
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing entry `{key}`")))
        };
        let text: Vec<u8> = find(CONFIG)?
            .data()
            .iter()
            .map(|&x| if (0.0..=255.0).contains(&x) && x.fract() == 0.0 { Ok(x as u8) } else { Err(Error::Format("config bytes out of range".into())) })
            .collect::<Result<_>>()?;
        let text = String::from_utf8(text).map_err(|_| Error::Format("config snapshot is not UTF-8".into()))?;
        let config = Config::from_toml(&text)?;
        let step = match find(STEP)?.data() {
            [lo, hi] => lo.to_bits() as u64 | (hi.to_bits() as u64) << 32,
            _ => return Err(Error::Format("step entry must hold two words".into())),
        };
        let mut params = ParamStore::new();
        Detector::new(&config.model, &mut params, 0)?;
        let mut adam = AdamState::new(&params);
        adam.t = step;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_string();
            for (prefix, slot) in [(PARAM, 0), (MOMENT1, 1), (MOMENT2, 2)] {
                let t = find(&format!("{prefix}{name}"))?;
                let target = match slot {
                    0 => params.value_mut(id),
                    1 => &mut adam.m[id.index()],
                    _ => &mut adam.v[id.index()],
                };
                if t.shape() != target.shape() {
                    return Err(Error::Format(format!(
                        "entry `{prefix}{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        target.shape()
                    )));
                }
                *target = t.clone();
            }
        }
        let expected = 2 + 3 * params.len();
        if entries.len() != expected {
            return Err(Error::Format(format!("{} entries, expected {expected}", entries.len())));
        }
        Ok(Checkpoint {
            config,
            params,
            adam,
            step,
        })
    }

    /// Rebuilds the detector structure; weights come from `self.params`.
    pub fn detector(&self) -> Result<Detector> {
        let mut scratch = ParamStore::<f32>::new();
        Detector::new(&self.config.model, &mut scratch, 0)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_entries(path, &ckpt.to_entries())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_entries(read_entries(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> Checkpoint {
        let mut config = Config::default();
        config.model = ModelConfig {
            n: 4,
            c: 8,
            m: 4,
            k_mff: 2,
            n_pts: 2,
            heads: 2,
            roi_size: 2,
            backbone_width: 4,
            ..ModelConfig::default()
        };
        let mut params = ParamStore::new();
        Detector::new(&config.model, &mut params, 11).unwrap();
        let mut adam = AdamState::new(&params);
        adam.m[0].data_mut()[0] = -0.0;
        adam.v[1].data_mut()[0] = f32::MIN_POSITIVE / 2.0;
        adam.t = 1 << 33;
        Checkpoint {
            config,
            params,
            adam,
            step: 1 << 33,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.golo");
        let ckpt = small();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let bits = |c: &Checkpoint| c.to_entries().iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ckpt));
        assert_eq!(back.step, ckpt.step);
        assert_eq!(back.config, ckpt.config);
        assert!(!dir.path().join("c.tmp").exists());
    }

    #[test]
    fn corrupt_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.golo");
        save_checkpoint(&path, &small()).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Io(_))));
        let mut future = bytes.clone();
        future[4] = 9;
        fs::write(&path, &future).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
