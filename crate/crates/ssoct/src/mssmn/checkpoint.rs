//! Model checkpoint container ("MSSM").
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "MSSM" | version u32 | json_len u32 | json blob | record_count u32
//! record: name_len u32 | name utf8 | rank u32 | dims u32 x rank | f32 payload
//! ```
//!
//! The JSON blob carries the config snapshot and the Adam step counter.
//! Every parameter block contributes three records: its value and the two
//! optimizer moments (`<name>.adam_m`, `<name>.adam_v`). Values are stored
//! as f32, so a loaded model bit-equals the f32 cast of what was saved and
//! re-saving a loaded model reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{ModelConfig, Mssmn};

const MAGIC: &[u8; 4] = b"MSSM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    adam_t: u64,
}

fn write_record<W: Write>(out: &mut W, name: &str, tensor: &Tensor) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_model(model: &Mssmn, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let header = Header { config: *model.config(), adam_t: model.params.adam_t };
    let json = serde_json::to_vec(&header)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;

    let blocks = model.params.blocks();
    out.write_all(&((blocks.len() * 3) as u32).to_le_bytes())?;
    for block in blocks {
        write_record(&mut out, &block.name, &block.value)?;
        write_record(&mut out, &format!("{}.adam_m", block.name), &block.m1)?;
        write_record(&mut out, &format!("{}.adam_v", block.name), &block.m2)?;
    }
    out.flush()?;
    Ok(())
}

struct Reader<'a> {
    input: BufReader<File>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format { path: self.path.display().to_string(), detail: detail.into() }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.input
            .read_exact(&mut buf)
            .map_err(|_| self.fail(format!("truncated file while reading {}", what)))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn load_model(path: &Path) -> Result<Mssmn> {
    let mut r = Reader { input: BufReader::new(File::open(path)?), path };

    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(r.fail(format!("bad magic {:?}, expected \"MSSM\"", magic)));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {}, expected {}", version, VERSION)));
    }
    let json_len = r.u32("config length")? as usize;
    let json = r.bytes(json_len, "config blob")?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| r.fail(format!("config blob: {}", e)))?;

    let record_count = r.u32("record count")? as usize;
    let mut records: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..record_count {
        let name_len = r.u32("record name length")? as usize;
        let name = String::from_utf8(r.bytes(name_len, "record name")?)
            .map_err(|_| r.fail("record name is not utf-8"))?;
        let rank = r.u32("record rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(r.fail(format!("record {} has rank {}", name, rank)));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("record dim")? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.bytes(n * 4, "record payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(dims, data)
            .map_err(|e| r.fail(format!("record {}: {}", name, e)))?;
        if records.insert(name.clone(), tensor).is_some() {
            return Err(r.fail(format!("duplicate record {}", name)));
        }
    }

    // Rebuild the layout from the config snapshot, then require one record
    // of the exact shape for every value and moment tensor.
    let mut model = Mssmn::skeleton(header.config)?;
    model.params.adam_t = header.adam_t;
    for block in model.params.blocks_mut() {
        for (suffix, slot) in [("", 0usize), (".adam_m", 1), (".adam_v", 2)] {
            let name = format!("{}{}", block.name, suffix);
            let tensor = records.remove(&name).ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                detail: format!("missing record {}", name),
            })?;
            let target = match slot {
                0 => &mut block.value,
                1 => &mut block.m1,
                _ => &mut block.m2,
            };
            if tensor.shape() != target.shape() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!(
                        "record {} has shape {:?}, config implies {:?}",
                        name,
                        tensor.shape(),
                        target.shape()
                    ),
                });
            }
            *target = tensor;
        }
    }
    if !records.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "{} extra records not implied by the config (first: {})",
                records.len(),
                records.keys().next().unwrap()
            ),
        });
    }
    Ok(model)
}
