//! Binary checkpoint: magic, version, a JSON header and little-endian `f32`
//! blocks for the encoder parameters and optimizer moments.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Scaler;
use crate::diffable::Array;
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{ensure, Error, Result};
use crate::gmm::SphericalGmm;
use crate::trainer::{Adam, TrainConfig};

pub const MAGIC: &[u8; 8] = b"FSGMMCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    /// Cross-domain starting point, in scaled units.
    pub theta_o: SphericalGmm,
    pub scaler: Option<Scaler>,
    /// Completed optimizer steps.
    pub step: u64,
    pub master_seed: u64,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<Adam>,
    pub lr_scale: f64,
    pub best_val: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerInfo {
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    theta_o_means: Vec<Vec<f64>>,
    theta_o_sigmas: Vec<Vec<f64>>,
    scaler: Option<Scaler>,
    step: u64,
    master_seed: u64,
    train: Option<TrainConfig>,
    optimizer: Option<OptimizerInfo>,
    lr_scale: f64,
    best_val: Option<f64>,
    blocks: Vec<BlockInfo>,
}

fn is_f32_exact(v: f64) -> bool {
    v.is_nan() || f64::from(v as f32) == v
}

impl Checkpoint {
    fn blocks(&self) -> Vec<(String, &Array)> {
        let names = self.model.names();
        let mut out: Vec<(String, &Array)> = names
            .iter()
            .cloned()
            .zip(self.model.params().iter().map(|p| p.as_ref()))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, arrays) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
                out.extend(names.iter().map(|n| format!("{prefix}{n}")).zip(arrays.iter()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blocks = self.blocks();
        for (name, a) in &blocks {
            ensure!(
                a.data().iter().all(|&v| is_f32_exact(v)),
                Numeric,
                "block {name} holds values that do not survive f32 storage"
            );
        }
        let header = Header {
            encoder: self.model.config,
            theta_o_means: self.theta_o.means().to_vec(),
            theta_o_sigmas: self.theta_o.sigmas().to_vec(),
            scaler: self.scaler,
            step: self.step,
            master_seed: self.master_seed,
            train: self.train,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerInfo { t: o.t }),
            lr_scale: self.lr_scale,
            best_val: self.best_val,
            blocks: blocks
                .iter()
                .map(|(name, a)| BlockInfo {
                    name: name.clone(),
                    shape: a.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = blocks.iter().map(|(_, a)| a.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &blocks {
            for &v in a.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 20, Format, "checkpoint is truncated");
        ensure!(&bytes[..8] == MAGIC, Format, "not a checkpoint file");
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        ensure!(
            version == VERSION,
            Format,
            "checkpoint version {version} is not supported (expected {VERSION})"
        );
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        ensure!(bytes.len() - 20 >= len, Format, "checkpoint header is truncated");
        let header: Header = serde_json::from_slice(&bytes[20..20 + len])?;
        let mut rest = &bytes[20 + len..];

        let mut arrays = Vec::with_capacity(header.blocks.len());
        for b in &header.blocks {
            let n: usize = b.shape.iter().product();
            ensure!(rest.len() >= n * 4, Format, "block {} is truncated", b.name);
            let data = rest[..n * 4]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            arrays.push(Array::new(b.shape.clone(), data)?);
            rest = &rest[n * 4..];
        }
        ensure!(rest.is_empty(), Format, "{} trailing bytes after the last block", rest.len());

        header.encoder.validate()?;
        let layout = header.encoder.layout();
        let np = layout.len();
        let expected = if header.optimizer.is_some() { 3 * np } else { np };
        ensure!(
            arrays.len() == expected,
            Format,
            "expected {expected} blocks, found {}",
            arrays.len()
        );
        for (k, b) in header.blocks.iter().enumerate() {
            let (name, shape) = &layout[k % np];
            let want = match k / np {
                0 => name.clone(),
                1 => format!("adam.m.{name}"),
                _ => format!("adam.v.{name}"),
            };
            ensure!(
                b.name == want && &b.shape == shape,
                Format,
                "block {k} is {} {:?}, expected {want} {shape:?}",
                b.name,
                b.shape
            );
        }
        let mut it = arrays.into_iter();
        let params: Vec<Array> = it.by_ref().take(np).collect();
        let model = EncoderModel::from_params(header.encoder, params)?;
        let optimizer = header.optimizer.map(|o| Adam {
            t: o.t,
            m: it.by_ref().take(np).collect(),
            v: it.by_ref().take(np).collect(),
        });
        let theta_o = SphericalGmm::new(header.theta_o_means, header.theta_o_sigmas)?;
        ensure!(
            theta_o.j() == header.encoder.j && theta_o.t() == header.encoder.t,
            Format,
            "theta_o shape disagrees with the encoder config"
        );
        Ok(Checkpoint {
            model,
            theta_o,
            scaler: header.scaler,
            step: header.step,
            master_seed: header.master_seed,
            train: header.train,
            optimizer,
            lr_scale: header.lr_scale,
            best_val: header.best_val,
        })
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(reason) => Error::Incompatible {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}
