//! Checkpoints: one dense-array file per named parameter plus a manifest
//! recording the resolved configuration and the parameter inventory. A
//! checkpoint restores into a freshly constructed model of the same
//! configuration, so only tensor contents travel through disk.

use std::fs;
use std::path::Path;

use wsol_tensor::{ndfile, Tensor};

use crate::config::Config;
use crate::error::{Result, WsolError};

pub const MANIFEST: &str = "manifest.txt";

fn param_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.{}", ndfile::EXTENSION))
}

pub fn save(dir: &Path, cfg: &Config, named: &[(String, &Tensor<f32>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str("# checkpoint manifest: resolved config, then parameter inventory\n");
    manifest.push_str(&cfg.to_text());
    manifest.push_str("\n[params]\n");
    for (name, tensor) in named {
        ndfile::write(&param_path(dir, name), tensor)?;
        let dims: Vec<String> = tensor.shape().iter().map(ToString::to_string).collect();
        manifest.push_str(&format!("{name} {}\n", dims.join("x")));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Loads every named parameter from `dir` into the given slots. Missing
/// files and shape disagreements are hard errors; extra files in the
/// directory are ignored.
pub fn load(dir: &Path, named: Vec<(String, &mut Tensor<f32>)>) -> Result<()> {
    for (name, slot) in named {
        let path = param_path(dir, &name);
        if !path.exists() {
            return Err(WsolError::MissingParameter {
                dir: dir.to_path_buf(),
                name,
            });
        }
        let loaded: Tensor<f32> = ndfile::read(&path)?;
        if loaded.shape() != slot.shape() {
            return Err(WsolError::Format {
                what: "checkpoint parameter shape",
                detail: format!(
                    "{name}: stored {:?} vs model {:?}",
                    loaded.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = loaded;
    }
    Ok(())
}

/// Pairs a model's parameter names with mutable slots for [`load`].
/// `names` and `params` must come from the same model so the canonical
/// orders agree.
pub fn name_slots<'m>(
    names: Vec<String>,
    params: Vec<&'m mut Tensor<f32>>,
) -> Vec<(String, &'m mut Tensor<f32>)> {
    assert_eq!(names.len(), params.len(), "name/param count mismatch");
    names.into_iter().zip(params).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mffnet::MffNet;
    use crate::seeding::derive_rng;

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.image_size = 32;
        cfg
    }

    fn names_of(net: &MffNet) -> Vec<String> {
        net.named_params().iter().map(|(n, _)| n.clone()).collect()
    }

    #[test]
    fn roundtrip_restores_every_parameter_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let mut rng = derive_rng(31, 70, 0);
        let net = MffNet::new(&mut rng, &cfg, 4);
        save(dir.path(), &cfg, &net.named_params()).unwrap();

        let mut rng2 = derive_rng(99, 70, 1);
        let mut restored = MffNet::new(&mut rng2, &cfg, 4);
        let names = names_of(&restored);
        load(dir.path(), name_slots(names, restored.params_mut())).unwrap();

        for ((na, a), (nb, b)) in net.named_params().iter().zip(restored.named_params()) {
            assert_eq!(na, &nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "parameter {na} changed");
        }
    }

    #[test]
    fn missing_parameter_file_is_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let mut rng = derive_rng(32, 70, 2);
        let net = MffNet::new(&mut rng, &cfg, 4);
        save(dir.path(), &cfg, &net.named_params()).unwrap();
        std::fs::remove_file(param_path(dir.path(), "cls.weight")).unwrap();

        let mut restored = MffNet::new(&mut rng, &cfg, 4);
        let names = names_of(&restored);
        let err = load(dir.path(), name_slots(names, restored.params_mut()));
        match err {
            Err(WsolError::MissingParameter { name, .. }) => assert_eq!(name, "cls.weight"),
            other => panic!("expected MissingParameter, got {other:?}"),
        }
    }

    #[test]
    fn manifest_records_seed_and_inventory() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.seed = 777;
        let mut rng = derive_rng(33, 70, 3);
        let net = MffNet::new(&mut rng, &cfg, 4);
        save(dir.path(), &cfg, &net.named_params()).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(manifest.contains("seed = 777"));
        assert!(manifest.contains("cls.weight 64x4"));
    }
}
