//! Versioned checkpoint file: JSON header (config + training state)
//! followed by raw little-endian f32 blobs for parameters and optimizer
//! moments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{NetConfig, Network};

const MAGIC: &[u8; 8] = b"VSEGCKPT";
const VERSION: u32 = 1;

/// Adam moments plus step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    #[serde(skip)]
    pub m: Vec<f32>,
    #[serde(skip)]
    pub v: Vec<f32>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Trainer bookkeeping needed to resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub best_val: f64,
    pub epochs_since_improve: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub params: Vec<f32>,
    pub optimizer: Option<OptimizerState>,
    pub train_state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: NetConfig,
    n_params: usize,
    optimizer: Option<OptimizerState>,
    train_state: Option<TrainState>,
}

fn f32s_to_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_f32s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let header = Header {
            version: VERSION,
            config: self.config,
            n_params: self.params.len(),
            optimizer: self.optimizer.clone(),
            train_state: self.train_state.clone(),
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(&mut f);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(header_json.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&header_json).map_err(io)?;
        w.write_all(&f32s_to_bytes(&self.params)).map_err(io)?;
        if let Some(opt) = &self.optimizer {
            w.write_all(&f32s_to_bytes(&opt.m)).map_err(io)?;
            w.write_all(&f32s_to_bytes(&opt.v)).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(f);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
        let mut header_json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header_json)
            .map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_slice(&header_json)
            .map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;
        if header.version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                header.version
            )));
        }
        let params = read_f32s(&mut r, header.n_params, path)?;
        let optimizer = match header.optimizer {
            Some(mut opt) => {
                opt.m = read_f32s(&mut r, header.n_params, path)?;
                opt.v = read_f32s(&mut r, header.n_params, path)?;
                Some(opt)
            }
            None => None,
        };
        Ok(Checkpoint {
            config: header.config,
            params,
            optimizer,
            train_state: header.train_state,
        })
    }
}

impl Network {
    /// Snapshot of the network parameters (no optimizer state).
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: *self.config(),
            params: self.params().flatten(),
            optimizer: None,
            train_state: None,
        }
    }

    /// Rebuilds a network from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Network> {
        let mut net = Network::build(&ck.config, 0)?;
        net.params_mut().load_flat(&ck.params)?;
        Ok(net)
    }

    /// Loads parameters into this network; the checkpoint must carry an
    /// identical configuration.
    pub fn load_checkpoint_params(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.config != *self.config() {
            return Err(Error::Config(format!(
                "checkpoint config {:?} does not match network config {:?}",
                ck.config,
                self.config()
            )));
        }
        self.params_mut().load_flat(&ck.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{NetConfig, Variant};
    use ndarray::Array4;

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetConfig {
            base_channels: 4,
            ..NetConfig::toy(Variant::UnetResidual)
        };
        let net = Network::build(&cfg, 42).unwrap();
        let path = dir.path().join("net.vckpt");
        net.to_checkpoint().save(&path).unwrap();
        let restored = Network::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        let x = Array4::<f32>::from_elem((4, 8, 8, 8), 0.3);
        assert_eq!(
            net.predict_softmax(&x).unwrap(),
            restored.predict_softmax(&x).unwrap()
        );
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let cfg_a = NetConfig {
            base_channels: 4,
            ..NetConfig::toy(Variant::UnetBasic)
        };
        let cfg_b = NetConfig {
            base_channels: 8,
            ..NetConfig::toy(Variant::UnetBasic)
        };
        let a = Network::build(&cfg_a, 1).unwrap();
        let mut b = Network::build(&cfg_b, 2).unwrap();
        assert!(matches!(
            b.load_checkpoint_params(&a.to_checkpoint()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetConfig {
            base_channels: 4,
            levels: 2,
            ..NetConfig::toy(Variant::UnetBasic)
        };
        let net = Network::build(&cfg, 3).unwrap();
        let n = net.param_count();
        let mut ck = net.to_checkpoint();
        ck.optimizer = Some(OptimizerState {
            m: vec![0.5; n],
            v: vec![0.25; n],
            step: 17,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        });
        ck.train_state = Some(TrainState {
            epoch: 3,
            lr: 2e-5,
            best_val: 0.4,
            epochs_since_improve: 5,
        });
        let path = dir.path().join("opt.vckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let opt = loaded.optimizer.unwrap();
        assert_eq!(opt.step, 17);
        assert_eq!(opt.m.len(), n);
        assert!(opt.m.iter().all(|&v| v == 0.5));
        assert_eq!(loaded.train_state.unwrap().lr, 2e-5);
    }

    #[test]
    fn garbage_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.vckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
    }
}
