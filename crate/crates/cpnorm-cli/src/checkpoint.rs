//! Checkpoint persistence: a little-endian `u64` header length, a JSON
//! header describing the run and the payload layout, then every trainable
//! scalar as little-endian `f32`, in the model's canonical parameter order.
//!
//! Loading rebuilds the architecture from the header and copies the payload
//! back in; the stored `f32` values widen to `f64` exactly, so a loaded
//! model is bit-for-bit the checkpoint's contents and a save of it
//! reproduces the file.

use crate::config::{Architecture, DatasetKind};
use crate::CliError;
use cpnorm::cp::LambdaInit;
use cpnorm::nn::{alexnet_spec, lenet_spec, Model, Normalization, WeightInit};
use cpnorm::optim::OptimKind;
use cpnorm::train::SplitMetrics;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Loss/accuracy measured at the checkpoint's own stored precision.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StoredMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

impl From<SplitMetrics> for StoredMetrics {
    fn from(m: SplitMetrics) -> Self {
        StoredMetrics {
            loss: m.loss,
            accuracy: m.accuracy,
        }
    }
}

/// One named parameter slice in the payload; offsets and lengths count
/// `f32` scalars, not bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PayloadEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub architecture: String,
    pub dataset: String,
    pub normalization: String,
    /// CP rank per weight layer at save time; empty for non-CP models.
    pub ranks: Vec<usize>,
    pub seed: u64,
    pub threads: usize,
    pub epochs_trained: usize,
    pub optimizer: String,
    pub learning_rate: f64,
    /// Test-split metrics of exactly the parameters stored below.
    pub test_metrics: Option<StoredMetrics>,
    pub entries: Vec<PayloadEntry>,
}

/// Run facts recorded into the header at save time.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub dataset: DatasetKind,
    pub normalization: Normalization,
    pub seed: u64,
    pub epochs_trained: usize,
    pub optimizer: OptimKind,
    pub learning_rate: f64,
    pub test_metrics: Option<SplitMetrics>,
}

fn norm_tag(n: Normalization) -> &'static str {
    match n {
        Normalization::None => "none",
        Normalization::Weight => "weight",
        Normalization::Cp => "cp",
    }
}

fn parse_norm_tag(s: &str) -> Result<Normalization, CliError> {
    match s {
        "none" => Ok(Normalization::None),
        "weight" => Ok(Normalization::Weight),
        "cp" => Ok(Normalization::Cp),
        other => Err(CliError::Data(format!(
            "checkpoint names unknown normalization '{other}'"
        ))),
    }
}

fn optim_tag(o: OptimKind) -> &'static str {
    match o {
        OptimKind::Sgd => "sgd",
        OptimKind::RmsProp => "rmsprop",
        OptimKind::Adam => "adam",
    }
}

/// Builds an architecture with freshly initialized parameters — the frame a
/// checkpoint payload is loaded into, and the starting point for training.
pub fn build_model(
    architecture: Architecture,
    dataset: DatasetKind,
    normalization: Normalization,
    ranks: Option<&[usize]>,
    init: WeightInit,
    lambda_init: LambdaInit,
    seed: u64,
) -> Result<Model, CliError> {
    let specs = match architecture {
        Architecture::Lenet => lenet_spec(normalization, ranks)?,
        Architecture::Alexnet => alexnet_spec(normalization, ranks)?,
    };
    let model = Model::build(&dataset.input_shape(), &specs, init, lambda_init, seed)?;
    Ok(model)
}

/// Rounds every trainable scalar to its stored (`f32`) precision in place,
/// so metrics measured afterwards describe exactly what a checkpoint holds.
pub fn quantize_to_stored_precision(model: &mut Model) -> Result<(), CliError> {
    model.visit_params(&mut |_, values, _| {
        for v in values {
            *v = *v as f32 as f64;
        }
        Ok(())
    })?;
    Ok(())
}

pub fn save_checkpoint(
    model: &mut Model,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), CliError> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    model.visit_params(&mut |name, values, _| {
        entries.push(PayloadEntry {
            name: name.to_string(),
            offset: payload.len() / 4,
            len: values.len(),
        });
        for v in values.iter() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(())
    })?;

    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        architecture: meta.architecture.as_str().to_string(),
        dataset: meta.dataset.as_str().to_string(),
        normalization: norm_tag(meta.normalization).to_string(),
        ranks: model
            .cp_layers()
            .iter()
            .map(|(_, p)| p.cp.rank())
            .collect(),
        seed: meta.seed,
        threads: 1,
        epochs_trained: meta.epochs_trained,
        optimizer: optim_tag(meta.optimizer).to_string(),
        learning_rate: meta.learning_rate,
        test_metrics: meta.test_metrics.map(StoredMetrics::from),
        entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CliError::Data(format!("cannot encode checkpoint header: {e}")))?;

    let mut out = Vec::with_capacity(8 + header_json.len() + payload.len());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    std::fs::write(path, out)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Reads a checkpoint, rebuilds its architecture, and installs the stored
/// parameters. The payload must be partitioned exactly by the header's
/// entries, and every entry must match a parameter of the rebuilt model.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Model), CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let bad = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("too short for a checkpoint".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 8 + header_len {
        return Err(bad(format!(
            "header declares {header_len} bytes but only {} remain",
            bytes.len() - 8
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| bad(format!("malformed header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unrecognized checkpoint version {}",
            header.version
        )));
    }

    let payload = &bytes[8 + header_len..];
    if payload.len() % 4 != 0 {
        return Err(bad(format!(
            "payload of {} bytes is not a whole number of f32 scalars",
            payload.len()
        )));
    }
    let total: usize = payload.len() / 4;
    let mut covered = vec![false; total];
    for e in &header.entries {
        if e.offset + e.len > total {
            return Err(bad(format!(
                "entry '{}' runs past the payload ({} + {} > {total})",
                e.name, e.offset, e.len
            )));
        }
        for slot in &mut covered[e.offset..e.offset + e.len] {
            if *slot {
                return Err(bad(format!("entry '{}' overlaps another entry", e.name)));
            }
            *slot = true;
        }
    }
    if covered.iter().any(|&c| !c) {
        return Err(bad("payload has scalars no entry describes".into()));
    }

    let architecture: Architecture = header
        .architecture
        .parse()
        .map_err(|e: String| bad(e))?;
    let dataset: DatasetKind = header.dataset.parse().map_err(|e: String| bad(e))?;
    let normalization = parse_norm_tag(&header.normalization)?;
    let ranks = if header.ranks.is_empty() {
        None
    } else {
        Some(header.ranks.as_slice())
    };
    let mut model = build_model(
        architecture,
        dataset,
        normalization,
        ranks,
        WeightInit::KaimingNormal,
        LambdaInit::Ones,
        header.seed,
    )?;

    let by_name: HashMap<&str, &PayloadEntry> = header
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    let mut installed = 0usize;
    model.visit_params(&mut |name, values, _| {
        let entry = by_name.get(name).ok_or_else(|| {
            cpnorm::Error::Data(format!("checkpoint has no entry for parameter '{name}'"))
        })?;
        if entry.len != values.len() {
            return Err(cpnorm::Error::Data(format!(
                "parameter '{name}' expects {} scalars but the checkpoint stores {}",
                values.len(),
                entry.len
            )));
        }
        let base = entry.offset * 4;
        for (i, v) in values.iter_mut().enumerate() {
            let raw: [u8; 4] = payload[base + i * 4..base + (i + 1) * 4]
                .try_into()
                .expect("4 bytes");
            *v = f32::from_le_bytes(raw) as f64;
        }
        installed += 1;
        Ok(())
    })?;
    if installed != header.entries.len() {
        return Err(bad(format!(
            "checkpoint stores {} parameters but the model exposes {installed}",
            header.entries.len()
        )));
    }
    Ok((header, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cpnorm::tensor::DenseTensor;

    fn meta(norm: Normalization) -> CheckpointMeta {
        CheckpointMeta {
            architecture: Architecture::Lenet,
            dataset: DatasetKind::Mnist,
            normalization: norm,
            seed: 3,
            epochs_trained: 1,
            optimizer: OptimKind::RmsProp,
            learning_rate: 0.001,
            test_metrics: Some(SplitMetrics {
                loss: 0.25,
                accuracy: 0.93,
            }),
        }
    }

    fn forward_fixture(model: &mut Model) -> Vec<f64> {
        let x = DenseTensor::new(
            vec![1, 1, 28, 28],
            (0..784).map(|i| (i % 17) as f64 * 0.05 - 0.4).collect(),
        )
        .unwrap();
        model.forward(&x, false).unwrap().into_data()
    }

    #[test]
    fn round_trip_restores_parameters_and_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let small_ranks = [4, 6, 5, 3];
        let mut model = build_model(
            Architecture::Lenet,
            DatasetKind::Mnist,
            Normalization::Cp,
            Some(&small_ranks),
            WeightInit::KaimingNormal,
            LambdaInit::Ones,
            9,
        )
        .unwrap();
        quantize_to_stored_precision(&mut model).unwrap();
        let expect = forward_fixture(&mut model);
        save_checkpoint(&mut model, &meta(Normalization::Cp), &path).unwrap();

        let (header, mut loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(header.ranks, small_ranks);
        assert_eq!(header.threads, 1);
        let got = forward_fixture(&mut loaded);
        assert_eq!(expect.len(), got.len());
        for (a, b) in expect.iter().zip(&got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&mut loaded, &meta(Normalization::Cp), &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn dense_and_weight_norm_models_round_trip_too() {
        let dir = tempfile::tempdir().unwrap();
        for norm in [Normalization::None, Normalization::Weight] {
            let path = dir.path().join(format!("{}.ckpt", norm_tag(norm)));
            let mut model = build_model(
                Architecture::Lenet,
                DatasetKind::Mnist,
                norm,
                None,
                WeightInit::KaimingNormal,
                LambdaInit::Ones,
                11,
            )
            .unwrap();
            quantize_to_stored_precision(&mut model).unwrap();
            let expect = forward_fixture(&mut model);
            save_checkpoint(&mut model, &meta(norm), &path).unwrap();
            let (header, mut loaded) = load_checkpoint(&path).unwrap();
            assert!(header.ranks.is_empty());
            assert_eq!(expect, forward_fixture(&mut loaded));
        }
    }

    #[test]
    fn truncated_and_corrupt_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = build_model(
            Architecture::Lenet,
            DatasetKind::Mnist,
            Normalization::Cp,
            Some(&[2, 2, 2, 2]),
            WeightInit::KaimingNormal,
            LambdaInit::Ones,
            0,
        )
        .unwrap();
        save_checkpoint(&mut model, &meta(Normalization::Cp), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let clipped = dir.path().join("clipped.ckpt");
        std::fs::write(&clipped, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_checkpoint(&clipped).unwrap_err();
        assert!(matches!(err, CliError::Data(_)), "{err}");

        let padded = dir.path().join("padded.ckpt");
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&padded, &long).unwrap();
        let err = load_checkpoint(&padded).unwrap_err();
        assert!(err.to_string().contains("no entry describes"), "{err}");

        let garbage = dir.path().join("garbage.ckpt");
        std::fs::write(&garbage, b"ck").unwrap();
        assert!(load_checkpoint(&garbage).is_err());
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = build_model(
            Architecture::Lenet,
            DatasetKind::Mnist,
            Normalization::None,
            None,
            WeightInit::KaimingNormal,
            LambdaInit::Ones,
            0,
        )
        .unwrap();
        save_checkpoint(&mut model, &meta(Normalization::None), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[8..8 + header_len].to_vec()).unwrap();
        let bumped = json.replace("\"version\":1", "\"version\":9");
        let mut out = (bumped.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(bumped.as_bytes());
        out.extend_from_slice(&bytes[8 + header_len..]);
        let path2 = dir.path().join("future.ckpt");
        std::fs::write(&path2, out).unwrap();
        let err = load_checkpoint(&path2).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
