//! Checkpoints: a directory with `config.txt` and one VVT1 file per
//! parameter, named after the parameter.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::model::Encoder;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor};
use crate::numerics::Real;

pub const CONFIG_FILE: &str = "config.txt";

pub fn save<T: Real>(encoder: &Encoder<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, encoder.config().to_text())
        .map_err(|e| Error::io(format!("writing {}", cfg_path.display()), e))?;
    for (name, t) in encoder.params.tensors() {
        write_tensor(dir.join(format!("{name}.vvt")), t)?;
    }
    Ok(())
}

/// Loads a checkpoint; any tensor whose shape disagrees with the stored
/// configuration is rejected.
pub fn load(dir: &Path) -> Result<Encoder<f32>> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path)
        .map_err(|e| Error::io(format!("reading {}", cfg_path.display()), e))?;
    let cfg = ModelConfig::parse(&text)?;
    let mut params = ModelParams::<f32>::zeros(&cfg)?;
    for (name, slot) in params.tensors_mut() {
        let path = dir.join(format!("{name}.vvt"));
        let t = read_tensor(&path)?;
        if t.shape() != slot.shape() {
            return Err(Error::Format {
                path,
                reason: format!("shape {:?}, model expects {:?}", t.shape(), slot.shape()),
            });
        }
        *slot = t;
    }
    Encoder::from_params(cfg, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PosembStrategy;
    use crate::numerics::{Rng, Tensor};

    #[test]
    fn roundtrip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        for s in PosembStrategy::ALL {
            let mut cfg = ModelConfig::tiny();
            cfg.posemb = s;
            let mut rng = Rng::new(1);
            let mut enc = Encoder::<f32>::new(cfg.clone(), &mut rng).unwrap();
            enc.params.head_weight = Tensor::from_fn(&[24, 2], |_| rng.normal() as f32);
            let path = dir.path().join(s.name());
            save(&enc, &path).unwrap();
            let back = load(&path).unwrap();
            assert_eq!(back.params, enc.params);
            assert_eq!(back.config(), enc.config());
        }
    }

    #[test]
    fn mismatched_shape_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let enc = Encoder::<f32>::new(ModelConfig::tiny(), &mut Rng::new(2)).unwrap();
        save(&enc, dir.path()).unwrap();
        write_tensor(dir.path().join("head.bias.vvt"), &Tensor::<f32>::zeros(&[3])).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("head.bias"));
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let enc = Encoder::<f32>::new(ModelConfig::tiny(), &mut Rng::new(2)).unwrap();
        save(&enc, dir.path()).unwrap();
        fs::remove_file(dir.path().join("cls_token.vvt")).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
