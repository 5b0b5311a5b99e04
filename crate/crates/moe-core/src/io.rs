//! Flat binary persistence for named tensor sets.
//!
//! Layout: magic `MOET`, u32 version, u32 entry count, then per entry a
//! u32-length UTF-8 name, u32 rank, u32 dims, and the row-major payload as
//! little-endian f64. Hyperparameters travel in a JSON sidecar next to the
//! binary file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::affinity::GateParams;
use crate::error::{Error, Result};
use crate::moe::ExpertBank;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MOET";
const VERSION: u32 = 1;

pub fn write_tensors(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if read_u32(&mut r)? != VERSION {
        return Err(Error::Format("unsupported version".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Flatten an expert bank plus gate into named entries.
pub fn bank_entries<'a>(
    bank: &'a ExpertBank,
    gate: &'a GateParams,
) -> Vec<(String, &'a Tensor)> {
    let mut entries = vec![("gate_weights".to_string(), &gate.weights)];
    for r in 0..bank.experts() {
        entries.push((format!("expert{r}_w1"), &bank.w1[r]));
        entries.push((format!("expert{r}_b1"), &bank.b1[r]));
        entries.push((format!("expert{r}_w2"), &bank.w2[r]));
        entries.push((format!("expert{r}_b2"), &bank.b2[r]));
    }
    if let Some(slots) = &bank.slots {
        entries.push(("slot_features".to_string(), slots));
    }
    entries
}

/// Rebuild a bank and gate from entries produced by [`bank_entries`].
pub fn bank_from_entries(
    entries: &[(String, Tensor)],
    noise_stddev: f64,
) -> Result<(ExpertBank, GateParams)> {
    let find = |name: &str| -> Result<&Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    };
    let gate = GateParams::new(find("gate_weights")?.clone(), noise_stddev)?;
    let mut w1 = Vec::new();
    let mut b1 = Vec::new();
    let mut w2 = Vec::new();
    let mut b2 = Vec::new();
    let mut r = 0;
    while entries.iter().any(|(n, _)| n == &format!("expert{r}_w1")) {
        w1.push(find(&format!("expert{r}_w1"))?.clone());
        b1.push(find(&format!("expert{r}_b1"))?.clone());
        w2.push(find(&format!("expert{r}_w2"))?.clone());
        b2.push(find(&format!("expert{r}_b2"))?.clone());
        r += 1;
    }
    if w1.is_empty() {
        return Err(Error::Format("no experts stored".into()));
    }
    let input_dim = w1[0].shape()[0];
    let hidden_dim = w1[0].shape()[1];
    let slots = entries
        .iter()
        .find(|(n, _)| n == "slot_features")
        .map(|(_, t)| t.clone());
    Ok((
        ExpertBank {
            input_dim,
            hidden_dim,
            w1,
            b1,
            w2,
            b2,
            slots,
        },
        gate,
    ))
}

pub fn write_json_sidecar<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("sidecar serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn bank_round_trips_bit_exact() {
        let mut rng = Rng::new(12);
        let bank = ExpertBank::init(3, 5, 2, &mut rng)
            .unwrap()
            .with_slots(2, &mut rng)
            .unwrap();
        let gate = GateParams::init(3, 2, 0.7, &mut rng).unwrap();
        let dir = std::env::temp_dir().join("moe_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bank.bin");
        write_tensors(&path, &bank_entries(&bank, &gate)).unwrap();
        let loaded = read_tensors(&path).unwrap();
        let (bank2, gate2) = bank_from_entries(&loaded, gate.noise_stddev).unwrap();
        assert_eq!(bank.w1, bank2.w1);
        assert_eq!(bank.b2, bank2.b2);
        assert_eq!(bank.slots, bank2.slots);
        assert_eq!(gate.weights, gate2.weights);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("moe_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Format(_))));
        std::fs::remove_file(path).ok();
    }
}
