//! Abstract schedule-primitive representation and the JSONL record format.
//!
//! A schedule-primitive sequence is an ordered list of primitives, each a
//! type tag plus ordered numeric/name arguments. Records pair a sequence with
//! the subgraph it was applied to and the measured latency.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default primitive-type mnemonics covering the common CPU and GPU
/// schedule transformations.
pub const DEFAULT_TYPE_NAMES: [&str; 14] = [
    "SP", "RE", "FU", "FSP", "CA", "AN", "RF", "PR", "CHW", "CR", "CI", "PRG", "UN", "TS",
];

/// Ordered, immutable set of primitive-type mnemonics. The one-hot layout of
/// extracted features depends on this order, so a registry must not change
/// once a model has been trained against it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct PrimitiveTypeRegistry {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl PrimitiveTypeRegistry {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Validation("empty primitive type name".into()));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate primitive type name `{name}`"
                )));
            }
        }
        Ok(Self { names, index })
    }

    /// 0-based type id for a mnemonic.
    pub fn index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, type_id: usize) -> Option<&str> {
        self.names.get(type_id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

impl Default for PrimitiveTypeRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_TYPE_NAMES).expect("default registry names are unique")
    }
}

impl From<PrimitiveTypeRegistry> for Vec<String> {
    fn from(reg: PrimitiveTypeRegistry) -> Self {
        reg.names
    }
}

impl TryFrom<Vec<String>> for PrimitiveTypeRegistry {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

/// A primitive argument: either a raw number or an identifier.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Arg {
    Number(f64),
    Name(String),
}

// Whole numbers serialize without a fractional part (`4`, not `4.0`), which
// keeps emitted lines in shortest round-trip form.
impl Serialize for Arg {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Arg::Number(v) => {
                if v.fract() == 0.0 && v.abs() < 9_007_199_254_740_992.0 {
                    serializer.serialize_i64(*v as i64)
                } else {
                    serializer.serialize_f64(*v)
                }
            }
            Arg::Name(s) => serializer.serialize_str(s),
        }
    }
}

/// One schedule primitive: a registry type id plus its ordered arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub type_id: usize,
    pub args: Vec<Arg>,
}

/// An ordered schedule-primitive sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrimitiveSequence {
    pub primitives: Vec<Primitive>,
}

impl PrimitiveSequence {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Self { primitives }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Content digest over type ids and arguments, order-sensitive.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in &self.primitives {
            hasher.update((p.type_id as u32).to_le_bytes());
            for arg in &p.args {
                match arg {
                    Arg::Number(v) => {
                        hasher.update([0u8]);
                        hasher.update(v.to_bits().to_le_bytes());
                    }
                    Arg::Name(s) => {
                        hasher.update([1u8]);
                        hasher.update((s.len() as u32).to_le_bytes());
                        hasher.update(s.as_bytes());
                    }
                }
            }
            // primitive terminator so ("SP",[1]) ++ ("RE",[]) != ("SP",[1,?])
            hasher.update([0xffu8]);
        }
        hasher.finalize().into()
    }
}

/// One dataset record: a sequence applied to a subgraph on some hardware,
/// with the measured latency in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorProgramRecord {
    pub subgraph_id: String,
    pub workload: String,
    pub hardware_id: String,
    pub latency: f64,
    pub sequence: PrimitiveSequence,
}

// Wire form of a record. Field order here is the emitted key order.
#[derive(Serialize, Deserialize)]
struct RawRecord {
    subgraph_id: String,
    workload: String,
    hardware_id: String,
    latency: f64,
    primitives: Vec<RawPrimitive>,
}

#[derive(Serialize, Deserialize)]
struct RawPrimitive {
    t: String,
    args: Vec<Arg>,
}

/// Parses one JSONL line into a record. Unknown JSON keys are ignored;
/// `line_number` is 1-based and only used in error messages.
pub fn parse_record(
    line: &str,
    registry: &PrimitiveTypeRegistry,
    line_number: usize,
) -> Result<TensorProgramRecord> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_number,
        msg: e.to_string(),
    })?;
    if raw.subgraph_id.is_empty() {
        return Err(Error::Validation(format!(
            "line {line_number}: subgraph_id must be nonempty"
        )));
    }
    if !(raw.latency > 0.0 && raw.latency.is_finite()) {
        return Err(Error::Validation(format!(
            "line {line_number}: latency must be a positive finite number, got {}",
            raw.latency
        )));
    }
    let mut primitives = Vec::with_capacity(raw.primitives.len());
    for rp in raw.primitives {
        let type_id = registry
            .index(&rp.t)
            .ok_or_else(|| Error::UnknownType(rp.t.clone()))?;
        primitives.push(Primitive {
            type_id,
            args: rp.args,
        });
    }
    Ok(TensorProgramRecord {
        subgraph_id: raw.subgraph_id,
        workload: raw.workload,
        hardware_id: raw.hardware_id,
        latency: raw.latency,
        sequence: PrimitiveSequence::new(primitives),
    })
}

/// Serializes a record as one JSONL line (no trailing newline). Keys are
/// emitted in schema order; numbers use shortest round-trip form.
///
/// Panics if a primitive's `type_id` is outside the registry.
pub fn serialize_record(record: &TensorProgramRecord, registry: &PrimitiveTypeRegistry) -> String {
    let raw = RawRecord {
        subgraph_id: record.subgraph_id.clone(),
        workload: record.workload.clone(),
        hardware_id: record.hardware_id.clone(),
        latency: record.latency,
        primitives: record
            .sequence
            .primitives
            .iter()
            .map(|p| RawPrimitive {
                t: registry
                    .name(p.type_id)
                    .unwrap_or_else(|| panic!("type_id {} outside registry", p.type_id))
                    .to_string(),
                args: p.args.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&raw).expect("record serialization cannot fail")
}

/// Reads a JSONL dataset file. Blank lines and lines starting with `#` are
/// skipped.
pub fn read_jsonl(
    path: impl AsRef<Path>,
    registry: &PrimitiveTypeRegistry,
) -> Result<Vec<TensorProgramRecord>> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        records.push(parse_record(trimmed, registry, i + 1)?);
    }
    Ok(records)
}

/// Writes records as a JSONL file, one record per line.
pub fn write_jsonl(
    path: impl AsRef<Path>,
    records: &[TensorProgramRecord],
    registry: &PrimitiveTypeRegistry,
) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    for record in records {
        writeln!(writer, "{}", serialize_record(record, registry))?;
    }
    writer.flush()?;
    Ok(())
}
