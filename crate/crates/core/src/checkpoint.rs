//! Checkpointing: a JSON manifest describing the topology plus a flat
//! little-endian f64 blob holding the parameters in manifest order
//! (shared by depth, branches by depth and slot, heads by task; each
//! layer weights row-major then bias).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::branching::BranchEvent;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::network::{BranchLayer, LayerParams, ParamId, Topology};

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerEntry {
    id: ParamId,
    in_dim: usize,
    out_dim: usize,
    /// Tasks served; present only for branch layers.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    tasks: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    in_dim: usize,
    hidden_widths: Vec<usize>,
    d: usize,
    d_c: usize,
    n_tasks: usize,
    layers: Vec<LayerEntry>,
    standardizer: Option<Standardizer>,
    events: Vec<BranchEvent>,
}

fn push_layer(blob: &mut Vec<u8>, p: &LayerParams) {
    for v in p.weights.iter() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    for v in p.bias.iter() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    top: &Topology,
    standardizer: Option<&Standardizer>,
    events: &[BranchEvent],
    dir: &Path,
) -> Result<()> {
    let mut layers = Vec::new();
    let mut blob = Vec::with_capacity(top.parameter_count() * 8);
    for id in top.param_ids() {
        let p = top.param(id);
        let tasks = match id {
            ParamId::Branch { depth, slot } => Some(
                top.branches[&depth][slot]
                    .tasks
                    .iter()
                    .copied()
                    .collect::<Vec<usize>>(),
            ),
            _ => None,
        };
        layers.push(LayerEntry {
            id,
            in_dim: p.weights.nrows(),
            out_dim: p.weights.ncols(),
            tasks,
        });
        push_layer(&mut blob, p);
    }
    let manifest = Manifest {
        in_dim: top.in_dim,
        hidden_widths: top.hidden_widths.clone(),
        d: top.d,
        d_c: top.d_c,
        n_tasks: top.n_tasks(),
        layers,
        standardizer: standardizer.cloned(),
        events: events.to_vec(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    std::fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

fn take_layer(
    blob: &[u8],
    offset: &mut usize,
    entry: &LayerEntry,
    depth: usize,
) -> Result<LayerParams> {
    let need = (entry.in_dim * entry.out_dim + entry.out_dim) * 8;
    if *offset + need > blob.len() {
        return Err(Error::Schema(format!(
            "parameter blob truncated at layer {:?}",
            entry.id
        )));
    }
    let mut read = || {
        let v = f64::from_le_bytes(blob[*offset..*offset + 8].try_into().unwrap());
        *offset += 8;
        v
    };
    let mut weights = Array2::zeros((entry.in_dim, entry.out_dim));
    for v in weights.iter_mut() {
        *v = read();
    }
    let mut bias = Array1::zeros(entry.out_dim);
    for v in bias.iter_mut() {
        *v = read();
    }
    Ok(LayerParams { weights, bias, depth })
}

pub fn load_checkpoint(dir: &Path) -> Result<(Topology, Option<Standardizer>, Vec<BranchEvent>)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let blob = std::fs::read(dir.join(BLOB_FILE))?;

    let mut shared = Vec::new();
    let mut branches: BTreeMap<usize, Vec<BranchLayer>> = BTreeMap::new();
    let mut heads = Vec::new();
    let mut offset = 0usize;
    for entry in &manifest.layers {
        match entry.id {
            ParamId::Shared { depth } => {
                shared.push(take_layer(&blob, &mut offset, entry, depth)?);
            }
            ParamId::Branch { depth, slot } => {
                let tasks: BTreeSet<usize> = entry
                    .tasks
                    .clone()
                    .ok_or_else(|| {
                        Error::Schema(format!("branch layer {:?} lacks a task set", entry.id))
                    })?
                    .into_iter()
                    .collect();
                let layers = branches.entry(depth).or_default();
                if layers.len() != slot {
                    return Err(Error::Schema(format!(
                        "branch slots at depth {depth} out of order"
                    )));
                }
                layers.push(BranchLayer {
                    params: take_layer(&blob, &mut offset, entry, depth)?,
                    tasks,
                });
            }
            ParamId::Head { .. } => {
                heads.push(take_layer(&blob, &mut offset, entry, manifest.d + 1)?);
            }
        }
    }
    if offset != blob.len() {
        return Err(Error::Schema(format!(
            "parameter blob has {} trailing bytes",
            blob.len() - offset
        )));
    }
    if heads.len() != manifest.n_tasks {
        return Err(Error::Schema(format!(
            "{} heads for {} tasks",
            heads.len(),
            manifest.n_tasks
        )));
    }

    let top = Topology {
        in_dim: manifest.in_dim,
        hidden_widths: manifest.hidden_widths,
        shared,
        branches,
        heads,
        d: manifest.d,
        d_c: manifest.d_c,
    };
    top.validate()?;
    Ok((top, manifest.standardizer, manifest.events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branching::form_branches;
    use crate::grouping::{update_task_groups, TaskGrouping};
    use crate::network::{forward, init_model};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn branched_topology() -> Topology {
        let mut top = init_model(5, &[7, 6, 4], 3, 90).unwrap();
        let tg = update_task_groups(&TaskGrouping::singletons(3), &[(0, 1)], top.d_c).unwrap();
        form_branches(&mut top, &tg).unwrap();
        // Make replicas distinguishable so order bugs would surface.
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        for id in top.param_ids() {
            let p = top.param_mut(id);
            p.weights.mapv_inplace(|v| v + 0.01 * rng.random_range(-1.0..1.0));
            p.bias.mapv_inplace(|v| v + 0.01 * rng.random_range(-1.0..1.0));
        }
        top
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let top = branched_topology();
        // Awkward decimals on purpose: scaling params ride through JSON and
        // must come back bit-exact, not merely close.
        let st = Standardizer {
            mean: vec![1.0 / 3.0, 0.1, -2.718281828459045, 1e-17, 0.045151878326227524],
            std: vec![2.0, 0.30000000000000004, 7.1e-9, std::f64::consts::PI, 1.0],
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&top, Some(&st), &[], dir.path()).unwrap();
        let (loaded, st2, events) = load_checkpoint(dir.path()).unwrap();
        assert!(events.is_empty());
        let st2 = st2.unwrap();
        assert_eq!(st2.mean, st.mean);
        assert_eq!(st2.std, st.std);
        assert_eq!(loaded.d_c, top.d_c);
        for id in top.param_ids() {
            assert_eq!(top.param(id).weights, loaded.param(id).weights, "{id:?}");
            assert_eq!(top.param(id).bias, loaded.param(id).bias);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let x = ndarray::Array2::from_shape_fn((16, 5), |_| rng.random_range(-1.0..1.0));
        assert_eq!(
            forward(&top, &x).unwrap().probs,
            forward(&loaded, &x).unwrap().probs
        );
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let top = branched_topology();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&top, None, &[], dir.path()).unwrap();
        let blob = std::fs::read(dir.path().join(BLOB_FILE)).unwrap();
        std::fs::write(dir.path().join(BLOB_FILE), &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Schema(_))));
        std::fs::write(
            dir.path().join(BLOB_FILE),
            [blob.clone(), vec![0u8; 8]].concat(),
        )
        .unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Schema(_))));
    }
}
