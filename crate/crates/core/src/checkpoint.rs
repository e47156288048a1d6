//! `RFCK` checkpoints: model config, parameters, Adam state and training
//! progress in one checksummed file.
//!
//! Layout (little-endian): magic, version u32, length-prefixed JSON header,
//! parameter count u32 then `name, rank u8, dims u32.., f32 data` per
//! parameter, Adam step u64 and moment count u32 then `name, rank, dims, m,
//! v` per entry, trailing CRC32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::network::{DualBranchSegNet, ModelConfig};
use crate::optim::{Adam, AdamConfig, AdamState, Moments};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RFCK";
pub const VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

/// Training progress stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_dsc: Option<f64>,
    /// Model was trained with the post volume fed to both branches.
    pub post_only: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    adam: AdamConfig,
    training: TrainingState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: DualBranchSegNet<f32>,
    pub optimizer: Adam<f32>,
    pub training: TrainingState,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.net.config().clone(),
            adam: self.optimizer.config,
            training: self.training.clone(),
        };
        let mut w = Writer::new(&MAGIC, VERSION);
        w.str(WHAT, &serde_json::to_string(&header)?)?;
        w.len_u32(WHAT, self.net.params.len())?;
        for p in self.net.params.iter() {
            w.str(WHAT, &p.name)?;
            w.dims(WHAT, p.value.shape())?;
            w.f32s(p.value.data());
        }
        let state = &self.optimizer.state;
        w.u64(state.step);
        w.len_u32(WHAT, state.moments.len())?;
        for (name, mom) in &state.moments {
            w.str(WHAT, name)?;
            w.dims(WHAT, &[mom.m.len()])?;
            w.f32s(&mom.m);
            w.f32s(&mom.v);
        }
        Ok(w.finish())
    }

    /// Rebuilds the model from the stored config and restores every tensor.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, params, state) = parse(bytes)?;
        let mut net = DualBranchSegNet::build(header.model)?;
        assign(&mut net.params, params)?;
        check_moments(&net.params, &state)?;
        Ok(Self {
            net,
            optimizer: Adam {
                config: header.adam,
                state,
            },
            training: header.training,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Loads the parameters of a checkpoint into an existing model. Either every
/// parameter is replaced or, on any mismatch, none is.
pub fn load_into(net: &mut DualBranchSegNet<f32>, bytes: &[u8]) -> Result<()> {
    let (header, params, _) = parse(bytes)?;
    if &header.model != net.config() {
        let mut stored = header.model.clone();
        stored.seed = net.config().seed;
        if &stored != net.config() {
            return Err(Error::Incompatible(format!(
                "stored config {} differs from model config {}",
                serde_json::to_string(&header.model)?,
                serde_json::to_string(net.config())?
            )));
        }
    }
    assign(&mut net.params, params)
}

type Entries = BTreeMap<String, Tensor<f32>>;

fn parse(bytes: &[u8]) -> Result<(Header, Entries, AdamState<f32>)> {
    let mut r = Reader::open(WHAT, bytes, &MAGIC, VERSION)?;
    let header: Header = serde_json::from_str(&r.str()?)?;
    let count = r.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name = r.str()?;
        let (dims, n) = r.dims()?;
        let value = Tensor::new(dims, r.f32s(n)?)?;
        if params.insert(name.clone(), value).is_some() {
            return Err(Error::DuplicateParameter(name));
        }
    }
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut moments = BTreeMap::new();
    for _ in 0..count {
        let name = r.str()?;
        let (dims, n) = r.dims()?;
        if dims.len() != 1 {
            return Err(r.format_error(format!("moment `{name}` must be rank 1")));
        }
        let m = r.f32s(n)?;
        let v = r.f32s(n)?;
        if moments.insert(name.clone(), Moments { m, v }).is_some() {
            return Err(Error::DuplicateParameter(name));
        }
    }
    r.finish()?;
    Ok((header, params, AdamState { step, moments }))
}

fn assign(store: &mut ParamStore<f32>, mut entries: Entries) -> Result<()> {
    for p in store.iter() {
        let Some(v) = entries.get(&p.name) else {
            return Err(Error::Incompatible(format!(
                "checkpoint lacks parameter `{}`",
                p.name
            )));
        };
        if v.shape() != p.value.shape() {
            return Err(Error::Incompatible(format!(
                "parameter `{}` has shape {:?}, model expects {:?}",
                p.name,
                v.shape(),
                p.value.shape()
            )));
        }
    }
    if let Some(extra) = entries.keys().find(|k| !store.contains(k)) {
        return Err(Error::UnknownParameter(extra.clone()));
    }
    for p in store.iter_mut() {
        p.value = entries.remove(&p.name).expect("checked above");
    }
    Ok(())
}

fn check_moments(store: &ParamStore<f32>, state: &AdamState<f32>) -> Result<()> {
    for (name, mom) in &state.moments {
        let p = store.get(name)?;
        if mom.m.len() != p.value.len() {
            return Err(Error::Incompatible(format!(
                "moment `{name}` has {} elements, parameter has {}",
                mom.m.len(),
                p.value.len()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionVariant;

    fn small(levels: usize) -> ModelConfig {
        ModelConfig {
            levels,
            base_channels: 2,
            variant: FusionVariant::WeightedAdd,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn checkpoint(levels: usize) -> Checkpoint {
        let net = DualBranchSegNet::build(small(levels)).unwrap();
        let mut optimizer = Adam::new(AdamConfig::default());
        let mut params = net.params.clone();
        for p in params.iter_mut() {
            let g: Vec<f32> = (0..p.value.len()).map(|i| (i as f32).sin()).collect();
            p.value.accumulate_grad(&g);
        }
        optimizer.step(&mut params);
        Checkpoint {
            net,
            optimizer,
            training: TrainingState {
                epoch: 3,
                best_val_dsc: Some(0.123456789),
                post_only: false,
            },
        }
    }

    #[test]
    fn encode_decode_encode_is_identical() {
        let ck = checkpoint(2);
        let a = ck.encode().unwrap();
        let back = Checkpoint::decode(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), a);
    }

    #[test]
    fn incompatible_load_changes_nothing() {
        let bytes = checkpoint(2).encode().unwrap();
        let mut other = DualBranchSegNet::build(small(3)).unwrap();
        let before = other.params.clone();
        assert!(matches!(
            load_into(&mut other, &bytes),
            Err(Error::Incompatible(_))
        ));
        assert_eq!(other.params, before);

        let mut same = DualBranchSegNet::build(ModelConfig {
            seed: 99,
            ..small(2)
        })
        .unwrap();
        load_into(&mut same, &bytes).unwrap();
        assert_eq!(same.params, checkpoint(2).net.params);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = checkpoint(2).encode().unwrap();
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() / 2]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::UnsupportedVersion { .. })
        ));
        let mut bad = bytes.clone();
        let last = bad.len() - 10;
        bad[last] ^= 0x40;
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::Checksum { .. })
        ));
    }
}
