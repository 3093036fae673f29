//! Key/value memory of past frames and the softmax-affinity readout.
//!
//! Similarity between a memory pixel key `k_p` and a query pixel key `q_q`
//! is `-|k_p - q_q|^2`, unscaled. Normalisation is a single softmax over all
//! memory pixels of all entries jointly, so each query column of the
//! affinity sums to one and every readout pixel is a convex combination of
//! memory values.

use crate::checkpoint;
use crate::encoders::Provenance;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub frame_index: usize,
    /// `[key_dim, HW]`
    pub key: Tensor,
    /// `[value_dim, HW]`
    pub value: Tensor,
    pub provenance: Provenance,
}

/// Memory-pixel x query-pixel affinity, `[M*HW, HW_q]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub matrix: Tensor,
    pub normalized: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBank {
    entries: Vec<MemoryEntry>,
    capacity: Option<usize>,
}

/// Flattens `[1,C,h,w]` to `[C, h*w]`; passes `[C, N]` through.
fn as_matrix(t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [1, c, h, w] => t.clone().reshape(vec![c, h * w]),
        [_, _] => Ok(t.clone()),
        ref s => Err(Error::shape(
            "memory",
            format!("expected [1,C,h,w] or [C,HW], got {s:?}"),
        )),
    }
}

impl MemoryBank {
    /// `capacity` bounds the number of entries; `None` is unbounded.
    pub fn new(capacity: Option<usize>) -> Result<Self> {
        if matches!(capacity, Some(c) if c < 2) {
            return Err(Error::Config(
                "memory capacity must be at least 2 (first frame + one more)".into(),
            ));
        }
        Ok(Self {
            entries: Vec::new(),
            capacity,
        })
    }

    pub fn unbounded() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }

    /// Appends an entry. Frame indices must strictly increase. When the bank
    /// is full the oldest entry other than the first is evicted.
    pub fn write(
        &mut self,
        frame_index: usize,
        key: &Tensor,
        value: &Tensor,
        provenance: Provenance,
    ) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if frame_index <= last.frame_index {
                return Err(Error::Contract(format!(
                    "memory write for frame {frame_index} after frame {}",
                    last.frame_index
                )));
            }
        }
        let key = as_matrix(key)?;
        let value = as_matrix(value)?;
        if key.shape()[1] != value.shape()[1] {
            return Err(Error::shape(
                "memory write",
                format!("key {:?} vs value {:?}", key.shape(), value.shape()),
            ));
        }
        if let Some(first) = self.entries.first() {
            if first.key.shape() != key.shape() || first.value.shape() != value.shape() {
                return Err(Error::shape(
                    "memory write",
                    format!(
                        "entry key {:?}/value {:?} vs bank {:?}/{:?}",
                        key.shape(),
                        value.shape(),
                        first.key.shape(),
                        first.value.shape()
                    ),
                ));
            }
        }
        self.entries.push(MemoryEntry {
            frame_index,
            key,
            value,
            provenance,
        });
        if let Some(cap) = self.capacity {
            if self.entries.len() > cap {
                self.entries.remove(1);
            }
        }
        Ok(())
    }

    /// Drops every entry whose frame index is `>= frame_index`.
    pub fn truncate_from(&mut self, frame_index: usize) {
        self.entries.retain(|e| e.frame_index < frame_index);
    }

    fn check_query(&self, query_key: &Tensor) -> Result<Tensor> {
        let first = self
            .entries
            .first()
            .ok_or_else(|| Error::State("affinity on an empty memory bank".into()))?;
        let q = as_matrix(query_key)?;
        if q.shape()[0] != first.key.shape()[0] {
            return Err(Error::shape(
                "affinity",
                format!(
                    "query key_dim {} vs memory key_dim {}",
                    q.shape()[0],
                    first.key.shape()[0]
                ),
            ));
        }
        Ok(q)
    }

    /// Raw similarities `-|k_p - q_q|^2` before normalisation.
    pub fn similarity(&self, query_key: &Tensor) -> Result<Tensor> {
        let q = self.check_query(query_key)?;
        let mut tape = Tape::new();
        let mem = TapeMemory::load(&mut tape, self);
        let q = tape.constant(q);
        let s = mem.similarity(&mut tape, q)?;
        Ok(tape.value(s).clone())
    }

    pub fn affinity(&self, query_key: &Tensor) -> Result<AffinityMatrix> {
        let q = self.check_query(query_key)?;
        let mut tape = Tape::new();
        let mem = TapeMemory::load(&mut tape, self);
        let q = tape.constant(q);
        let a = mem.affinity(&mut tape, q)?;
        Ok(AffinityMatrix {
            matrix: tape.value(a).clone(),
            normalized: true,
        })
    }

    /// `r[:, q] = sum_p A[p, q] v[:, p]`, giving `[value_dim, HW_q]`.
    pub fn readout(&self, affinity: &AffinityMatrix) -> Result<Tensor> {
        if !affinity.normalized {
            return Err(Error::Contract("readout needs a normalized affinity".into()));
        }
        let pixels: usize = self.entries.iter().map(|e| e.value.shape()[1]).sum();
        if affinity.matrix.rank() != 2 || affinity.matrix.shape()[0] != pixels {
            return Err(Error::shape(
                "readout",
                format!(
                    "affinity {:?} for a bank of {pixels} memory pixels",
                    affinity.matrix.shape()
                ),
            ));
        }
        let mut tape = Tape::new();
        let mem = TapeMemory::load(&mut tape, self);
        let a = tape.constant(affinity.matrix.clone());
        let r = mem.readout(&mut tape, a)?;
        Ok(tape.value(r).clone())
    }

    /// Spatially averaged value vector of each entry, in frame order.
    pub fn value_sequence(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|e| {
                let hw = e.value.shape()[1];
                let data = e
                    .value
                    .data()
                    .chunks(hw)
                    .map(|c| c.iter().sum::<f64>() / hw as f64)
                    .collect::<Vec<_>>();
                Tensor::from_parts(vec![data.len()], data)
            })
            .collect()
    }

    /// Serialises the bank in the checkpoint container as `key/{frame}`,
    /// `value/{frame}` records (plus `provenance/{frame}` and `capacity`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut records: Vec<(String, Tensor)> = Vec::new();
        records.push((
            "capacity".into(),
            Tensor::scalar(self.capacity.unwrap_or(0) as f64),
        ));
        for e in &self.entries {
            let f = e.frame_index;
            records.push((format!("key/{f}"), e.key.clone()));
            records.push((format!("value/{f}"), e.value.clone()));
            let gt = f64::from(u8::from(e.provenance == Provenance::GroundTruth));
            records.push((format!("provenance/{f}"), Tensor::scalar(gt)));
        }
        checkpoint::save(path, records.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = checkpoint::load(path)?;
        let mut capacity = None;
        let mut keys = Vec::new();
        let mut values = std::collections::BTreeMap::new();
        let mut provenance = std::collections::BTreeMap::new();
        for (name, t) in records {
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad memory record {name}")))
            };
            if name == "capacity" {
                let c = t.item()? as usize;
                capacity = (c > 0).then_some(c);
            } else if let Some(f) = name.strip_prefix("key/") {
                keys.push((parse(f)?, t));
            } else if let Some(f) = name.strip_prefix("value/") {
                values.insert(parse(f)?, t);
            } else if let Some(f) = name.strip_prefix("provenance/") {
                provenance.insert(parse(f)?, t.item()?);
            } else {
                return Err(Error::Format(format!("unexpected memory record {name}")));
            }
        }
        let mut bank = MemoryBank {
            entries: Vec::new(),
            capacity: None,
        };
        for (f, key) in keys {
            let value = values
                .remove(&f)
                .ok_or_else(|| Error::Format(format!("memory frame {f} has no value")))?;
            let prov = match provenance.get(&f) {
                Some(v) if *v == 1.0 => Provenance::GroundTruth,
                _ => Provenance::Predicted,
            };
            bank.write(f, &key, &value, prov)?;
        }
        bank.capacity = capacity;
        Ok(bank)
    }
}

/// Memory keys and values recorded on a tape, for differentiable readout.
#[derive(Clone, Debug, Default)]
pub struct TapeMemory {
    keys: Vec<Var>,
    values: Vec<Var>,
}

impl TapeMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a bank's tensors as constants.
    pub fn load(tape: &mut Tape, bank: &MemoryBank) -> Self {
        let mut mem = Self::new();
        for e in &bank.entries {
            mem.keys.push(tape.constant(e.key.clone()));
            mem.values.push(tape.constant(e.value.clone()));
        }
        mem
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn values(&self) -> &[Var] {
        &self.values
    }

    /// Adds an entry from `[1,C,h,w]` (or `[C,HW]`) key and value maps.
    pub fn push(&mut self, tape: &mut Tape, key: Var, value: Var) -> Result<()> {
        let flat = |tape: &mut Tape, v: Var| -> Result<Var> {
            match *tape.shape(v) {
                [1, c, h, w] => tape.reshape(v, vec![c, h * w]),
                [_, _] => Ok(v),
                ref s => Err(Error::shape("memory", format!("unexpected map {s:?}"))),
            }
        };
        let k = flat(tape, key)?;
        let v = flat(tape, value)?;
        self.keys.push(k);
        self.values.push(v);
        Ok(())
    }

    pub fn similarity(&self, tape: &mut Tape, query_key: Var) -> Result<Var> {
        if self.keys.is_empty() {
            return Err(Error::State("affinity on an empty memory bank".into()));
        }
        let keys = if self.keys.len() == 1 {
            self.keys[0]
        } else {
            tape.concat(&self.keys, 1)?
        };
        tape.neg_sq_dist(keys, query_key)
    }

    /// Softmax over all memory pixels of the similarity to `query_key: [D, Q]`.
    pub fn affinity(&self, tape: &mut Tape, query_key: Var) -> Result<Var> {
        let s = self.similarity(tape, query_key)?;
        tape.softmax(s, 0)
    }

    pub fn readout(&self, tape: &mut Tape, affinity: Var) -> Result<Var> {
        if self.values.is_empty() {
            return Err(Error::State("readout from an empty memory bank".into()));
        }
        let values = if self.values.len() == 1 {
            self.values[0]
        } else {
            tape.concat(&self.values, 1)?
        };
        tape.matmul(values, affinity)
    }

    /// Spatially pooled value vectors, `[value_dim]` each.
    pub fn value_sequence(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.values
            .iter()
            .map(|&v| {
                let s = tape.shape(v).to_vec();
                let m = tape.reshape(v, vec![1, s[0], 1, s[1]])?;
                let p = tape.avg_pool_spatial(m)?;
                tape.reshape(p, vec![s[0]])
            })
            .collect()
    }
}
