//! Model checkpoints.
//!
//! Layout: an 8-byte little-endian header length `h`, `h` bytes of UTF-8
//! JSON header, then every parameter's values as little-endian `f64` in the
//! order the header lists them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::rngs::mock::StepRng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{CsaError, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "csa-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    in_dim: usize,
    classes: usize,
    params: Vec<ParamEntry>,
}

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        config: model.config().clone(),
        in_dim: model.in_dim(),
        classes: model.classes(),
        params: model
            .params()
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let io_err = |e| CsaError::io("<checkpoint>", e);
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io_err)?;
    out.write_all(&json).map_err(io_err)?;
    for (_, _, t) in model.params().iter() {
        for x in t.data() {
            out.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Model> {
    let io_err = |e| CsaError::io("<checkpoint>", e);
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(io_err)?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| CsaError::invalid("checkpoint header length overflows"))?;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(CsaError::invalid(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    // parameters are overwritten below, so the init stream does not matter
    let mut model = Model::new(&header.config, header.in_dim, header.classes, &mut StepRng::new(0, 0))?;
    let built = model.params().len();
    for (i, entry) in header.params.iter().enumerate() {
        let numel: usize = entry.shape.iter().product();
        let mut data = vec![0.0; numel];
        let mut buf = [0u8; 8];
        for x in &mut data {
            input.read_exact(&mut buf).map_err(io_err)?;
            *x = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        if i < built {
            let id = model.params().ids().nth(i).expect("index below len");
            let expected = model.params().get(id);
            if model.params().name(id) != entry.name || expected.shape() != tensor.shape() {
                return Err(CsaError::invalid(format!(
                    "checkpoint parameter {} {:?} does not match architecture parameter {} {:?}",
                    entry.name,
                    entry.shape,
                    model.params().name(id),
                    expected.shape()
                )));
            }
            model.params_mut().get_mut(id).data_mut().copy_from_slice(tensor.data());
        } else {
            model.params_mut().add(entry.name.clone(), tensor);
        }
    }
    if header.params.len() < built {
        return Err(CsaError::invalid(format!(
            "checkpoint lists {} parameters, architecture needs {built}",
            header.params.len()
        )));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CsaError::io(path, e))?;
    write_checkpoint(model, BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = File::open(path).map_err(|e| CsaError::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
