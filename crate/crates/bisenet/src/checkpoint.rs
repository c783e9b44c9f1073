//! Directory-based checkpoints: a plain-text manifest plus one binary
//! tensor file per parameter and buffer.
//!
//! The manifest records the scalar type, a hash of the graph topology, and
//! the ordered parameter/buffer names. Loading verifies all of them against
//! the target graph before touching any tensor, so a checkpoint can only be
//! restored into a graph with the identical architecture. Round-trips are
//! bitwise exact.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{BufferId, Graph, ParamId};
use crate::rng::fnv1a;
use crate::scalar::Scalar;
use crate::tensor::io::{read_tensor, write_tensor};

const MANIFEST_NAME: &str = "manifest.txt";
const FORMAT_VERSION: u32 = 1;

fn mismatch(msg: impl Into<String>) -> Error {
    Error::CheckpointMismatch(msg.into())
}

/// Stable hash of the graph topology (node wiring, parameter and buffer
/// definitions). Two graphs built from the same configuration agree.
pub fn topology_hash<S: Scalar>(graph: &Graph<S>) -> u64 {
    fnv1a(graph.describe().as_bytes())
}

fn param_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("params").join(format!("{name}.bt2"))
}

fn buffer_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("buffers").join(format!("{name}.bt2"))
}

/// Writes the graph's parameters and buffers to `dir`, creating it if
/// needed. The graph must be initialized.
pub fn save<S: Scalar>(graph: &Graph<S>, dir: &Path) -> Result<()> {
    if !graph.is_initialized() {
        return Err(Error::state("cannot checkpoint an uninitialized graph"));
    }
    fs::create_dir_all(dir.join("params"))?;
    fs::create_dir_all(dir.join("buffers"))?;

    let mut manifest = String::new();
    manifest.push_str(&format!("format={FORMAT_VERSION}\n"));
    manifest.push_str(&format!("dtype={}\n", S::DTYPE.name()));
    manifest.push_str(&format!("topology={:016x}\n", topology_hash(graph)));
    manifest.push_str(&format!("params={}\n", graph.param_count()));
    manifest.push_str(&format!("buffers={}\n", graph.buffer_count()));
    for i in 0..graph.param_count() {
        manifest.push_str(&format!("param.{i}={}\n", graph.param_def(ParamId(i)).name));
    }
    for i in 0..graph.buffer_count() {
        manifest.push_str(&format!("buffer.{i}={}\n", graph.buffer_def(BufferId(i)).name));
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;

    for i in 0..graph.param_count() {
        let def = graph.param_def(ParamId(i));
        write_tensor(&param_path(dir, &def.name), graph.param(ParamId(i)))?;
    }
    for i in 0..graph.buffer_count() {
        let def = graph.buffer_def(BufferId(i));
        write_tensor(&buffer_path(dir, &def.name), graph.buffer(BufferId(i)))?;
    }
    Ok(())
}

struct Manifest {
    dtype: String,
    topology: u64,
    params: Vec<String>,
    buffers: Vec<String>,
}

fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let mut fields: HashMap<String, String> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Format(format!(
                "{}:{}: expected key=value, got {line:?}",
                path.display(),
                lineno + 1
            )));
        };
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<String> {
        fields
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Format(format!("{}: missing key {key:?}", path.display())))
    };
    let format: u32 = get("format")?
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad format version", path.display())))?;
    if format != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint format {format} (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    let topology = u64::from_str_radix(&get("topology")?, 16)
        .map_err(|_| Error::Format(format!("{}: bad topology hash", path.display())))?;
    let n_params: usize = get("params")?
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad params count", path.display())))?;
    let n_buffers: usize = get("buffers")?
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad buffers count", path.display())))?;
    let mut params = Vec::with_capacity(n_params);
    for i in 0..n_params {
        params.push(get(&format!("param.{i}"))?);
    }
    let mut buffers = Vec::with_capacity(n_buffers);
    for i in 0..n_buffers {
        buffers.push(get(&format!("buffer.{i}"))?);
    }
    Ok(Manifest { dtype: get("dtype")?, topology, params, buffers })
}

/// Restores parameters and buffers from `dir` into `graph` and marks it
/// initialized. The manifest's dtype, topology hash, and tensor names must
/// all match the graph exactly; any difference is a checkpoint mismatch.
pub fn load<S: Scalar>(graph: &mut Graph<S>, dir: &Path) -> Result<()> {
    let manifest = parse_manifest(&dir.join(MANIFEST_NAME))?;
    if manifest.dtype != S::DTYPE.name() {
        return Err(mismatch(format!(
            "checkpoint dtype {} does not match graph dtype {}",
            manifest.dtype,
            S::DTYPE.name()
        )));
    }
    let expected = topology_hash(graph);
    if manifest.topology != expected {
        return Err(mismatch(format!(
            "checkpoint topology {:016x} does not match graph topology {expected:016x} \
             (different architecture configuration)",
            manifest.topology
        )));
    }
    if manifest.params.len() != graph.param_count() {
        return Err(mismatch(format!(
            "checkpoint has {} params, graph has {}",
            manifest.params.len(),
            graph.param_count()
        )));
    }
    if manifest.buffers.len() != graph.buffer_count() {
        return Err(mismatch(format!(
            "checkpoint has {} buffers, graph has {}",
            manifest.buffers.len(),
            graph.buffer_count()
        )));
    }
    for (i, name) in manifest.params.iter().enumerate() {
        let def_name = &graph.param_def(ParamId(i)).name;
        if name != def_name {
            return Err(mismatch(format!(
                "param {i} name mismatch: checkpoint {name:?}, graph {def_name:?}"
            )));
        }
    }
    for (i, name) in manifest.buffers.iter().enumerate() {
        let def_name = &graph.buffer_def(BufferId(i)).name;
        if name != def_name {
            return Err(mismatch(format!(
                "buffer {i} name mismatch: checkpoint {name:?}, graph {def_name:?}"
            )));
        }
    }

    for i in 0..graph.param_count() {
        let def = graph.param_def(ParamId(i)).clone();
        let tensor: crate::Tensor<S> = read_tensor(&param_path(dir, &def.name))?;
        if tensor.shape() != def.shape {
            return Err(mismatch(format!(
                "param {:?} shape mismatch: checkpoint {}, graph {}",
                def.name,
                tensor.shape(),
                def.shape
            )));
        }
        graph.set_param(ParamId(i), tensor)?;
    }
    for i in 0..graph.buffer_count() {
        let def = graph.buffer_def(BufferId(i)).clone();
        let tensor: crate::Tensor<S> = read_tensor(&buffer_path(dir, &def.name))?;
        if tensor.shape() != def.shape {
            return Err(mismatch(format!(
                "buffer {:?} shape mismatch: checkpoint {}, graph {}",
                def.name,
                tensor.shape(),
                def.shape
            )));
        }
        graph.set_buffer(BufferId(i), tensor)?;
    }
    graph.mark_initialized();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::model::{build_model, ArchConfig, Variant, OUTPUT_MAIN};
    use crate::rng::NormalSource;
    use crate::tensor::Tensor;
    use crate::Shape4;

    fn tiny_cfg() -> ArchConfig {
        ArchConfig {
            classes: 3,
            alpha: 0.25,
            head_width: 64,
            input_hw: (64, 64),
            ..ArchConfig::default()
        }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut src = NormalSource::new(seed, "test.image");
        let mut t = Tensor::<f32>::zeros(Shape4::new(1, 3, h, w));
        for v in t.data_mut() {
            *v = (src.next() * 0.1) as f32;
        }
        t
    }

    #[test]
    fn round_trip_is_bitwise_exact_on_logits() {
        let cfg = tiny_cfg();
        let mut graph = build_model::<f32>(&cfg, Variant::Full).unwrap();
        graph.init_params(7);
        let dir = tempfile::tempdir().unwrap();
        save(&graph, dir.path()).unwrap();

        let x = random_image(11, 64, 64);
        let before = graph
            .forward(&[("input", &x)], &[OUTPUT_MAIN], Mode::Eval)
            .unwrap();
        let before = before.value(graph.output_node(OUTPUT_MAIN).unwrap()).unwrap().clone();

        let mut restored = build_model::<f32>(&cfg, Variant::Full).unwrap();
        assert!(!restored.is_initialized());
        load(&mut restored, dir.path()).unwrap();
        let after = restored
            .forward(&[("input", &x)], &[OUTPUT_MAIN], Mode::Eval)
            .unwrap();
        let after = after.value(restored.output_node(OUTPUT_MAIN).unwrap()).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn loading_into_different_architecture_is_a_mismatch() {
        let cfg = tiny_cfg();
        let mut graph = build_model::<f32>(&cfg, Variant::Full).unwrap();
        graph.init_params(7);
        let dir = tempfile::tempdir().unwrap();
        save(&graph, dir.path()).unwrap();

        let other_cfg = ArchConfig { expansion: 2, ..cfg };
        let mut other = build_model::<f32>(&other_cfg, Variant::Full).unwrap();
        let err = load(&mut other, dir.path()).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)), "got {err:?}");
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let cfg = tiny_cfg();
        let mut graph = build_model::<f32>(&cfg, Variant::Full).unwrap();
        graph.init_params(7);
        let dir = tempfile::tempdir().unwrap();
        save(&graph, dir.path()).unwrap();

        let mut f64_graph = build_model::<f64>(&cfg, Variant::Full).unwrap();
        let err = load(&mut f64_graph, dir.path()).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)), "got {err:?}");
    }

    #[test]
    fn saving_uninitialized_graph_fails() {
        let graph = build_model::<f32>(&tiny_cfg(), Variant::Full).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = save(&graph, dir.path()).unwrap_err();
        assert!(matches!(err, Error::State(_)), "got {err:?}");
    }
}
