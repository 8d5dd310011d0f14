//! Trace container: the on-disk format for per-token hidden-state traces.
//!
//! Layout (all integers and floats little-endian, no padding):
//!
//! ```text
//! b"LUNATRC1" | u64 header_len | header (UTF-8 JSON) | trace blocks...
//! ```
//!
//! Each trace block holds `T*D` f32 state values (row-major), then `T` f32
//! semantics values if flagged, then a single f32 label if flagged.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LUNATRC1";
pub const FORMAT_VERSION: u32 = 1;

/// One generated sequence: a `T x D` matrix of concrete states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub states: Array2<f32>,
    pub state_semantics: Option<Vec<f32>>,
    pub trace_label: Option<f32>,
}

impl Trace {
    pub fn new(states: Array2<f32>) -> Self {
        Trace {
            states,
            state_semantics: None,
            trace_label: None,
        }
    }

    pub fn with_label(mut self, label: f32) -> Self {
        self.trace_label = Some(label);
        self
    }

    pub fn with_semantics(mut self, semantics: Vec<f32>) -> Self {
        self.state_semantics = Some(semantics);
        self
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    /// States widened to f64 for analysis.
    pub fn states_f64(&self) -> Array2<f64> {
        self.states.mapv(f64::from)
    }

    fn validate(&self, index: usize, hidden_dim: usize) -> Result<()> {
        let (t, d) = self.states.dim();
        if t == 0 {
            return Err(Error::InvalidContainer(format!("trace {index} is empty")));
        }
        if d != hidden_dim {
            return Err(Error::ShapeMismatch(format!(
                "trace {index} has {d} columns, container hidden_dim is {hidden_dim}"
            )));
        }
        if self.states.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("trace {index} states")));
        }
        if let Some(sem) = &self.state_semantics {
            if sem.len() != t {
                return Err(Error::ShapeMismatch(format!(
                    "trace {index} has {} semantics values for {t} states",
                    sem.len()
                )));
            }
            check_unit_interval(sem, || format!("trace {index} semantics"))?;
        }
        if let Some(label) = self.trace_label {
            check_unit_interval(&[label], || format!("trace {index} label"))?;
        }
        Ok(())
    }
}

fn check_unit_interval(values: &[f32], what: impl Fn() -> String) -> Result<()> {
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue(what()));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!(
                "{} value {v} not in [0,1]",
                what()
            )));
        }
    }
    Ok(())
}

/// A validated collection of traces sharing one hidden dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceContainer {
    hidden_dim: usize,
    traces: Vec<Trace>,
    pub metadata: BTreeMap<String, String>,
}

/// Training and test sets are plain containers.
pub type TraceSet = TraceContainer;

impl TraceContainer {
    pub fn new(hidden_dim: usize, traces: Vec<Trace>) -> Result<Self> {
        Self::with_metadata(hidden_dim, traces, BTreeMap::new())
    }

    pub fn with_metadata(
        hidden_dim: usize,
        traces: Vec<Trace>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        if hidden_dim == 0 {
            return Err(Error::InvalidContainer(
                "hidden_dim must be positive".into(),
            ));
        }
        if traces.is_empty() {
            return Err(Error::InvalidContainer("container holds no traces".into()));
        }
        for (i, trace) in traces.iter().enumerate() {
            trace.validate(i, hidden_dim)?;
        }
        Ok(TraceContainer {
            hidden_dim,
            traces,
            metadata,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn total_states(&self) -> usize {
        self.traces.iter().map(Trace::len).sum()
    }

    /// All states stacked into one `sum(T) x D` matrix (f64).
    pub fn stacked_states(&self) -> Array2<f64> {
        let views: Vec<ArrayView2<f32>> = self.traces.iter().map(|t| t.states.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views)
            .expect("traces share hidden_dim")
            .mapv(f64::from)
    }

    pub fn into_traces(self) -> Vec<Trace> {
        self.traces
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    hidden_dim: usize,
    num_traces: usize,
    dtype: String,
    has_state_semantics: Vec<bool>,
    has_trace_label: Vec<bool>,
    trace_lengths: Vec<usize>,
    metadata: BTreeMap<String, String>,
}

/// Serializes a container to the binary format.
pub fn encode_container(container: &TraceContainer) -> Result<Vec<u8>> {
    let header = Header {
        version: FORMAT_VERSION,
        hidden_dim: container.hidden_dim,
        num_traces: container.traces.len(),
        dtype: "f32".into(),
        has_state_semantics: container
            .traces
            .iter()
            .map(|t| t.state_semantics.is_some())
            .collect(),
        has_trace_label: container
            .traces
            .iter()
            .map(|t| t.trace_label.is_some())
            .collect(),
        trace_lengths: container.traces.iter().map(Trace::len).collect(),
        metadata: container.metadata.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let payload_floats: usize = container
        .traces
        .iter()
        .map(|t| {
            t.states.len()
                + t.state_semantics.as_ref().map_or(0, Vec::len)
                + usize::from(t.trace_label.is_some())
        })
        .sum();
    let mut out = Vec::with_capacity(16 + header_bytes.len() + 4 * payload_floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for trace in &container.traces {
        // Iterating an Array2 in logical order is row-major regardless of layout.
        for v in trace.states.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(sem) = &trace.state_semantics {
            for v in sem {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(label) = trace.trace_label {
            out.extend_from_slice(&label.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates a container from raw bytes.
pub fn decode_container(bytes: &[u8]) -> Result<TraceContainer> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(Error::CorruptHeader("missing header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::CorruptHeader(format!("header length {header_len} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::CorruptHeader(e.to_string()))?;

    if header.version != FORMAT_VERSION {
        return Err(Error::CorruptHeader(format!(
            "unsupported version {}",
            header.version
        )));
    }
    if header.dtype != "f32" {
        return Err(Error::CorruptHeader(format!(
            "unsupported dtype {}",
            header.dtype
        )));
    }
    let n = header.num_traces;
    if header.has_state_semantics.len() != n
        || header.has_trace_label.len() != n
        || header.trace_lengths.len() != n
    {
        return Err(Error::CorruptHeader(
            "per-trace header arrays disagree with num_traces".into(),
        ));
    }
    if header.hidden_dim == 0 {
        return Err(Error::CorruptHeader("hidden_dim must be positive".into()));
    }

    let d = header.hidden_dim;
    let expected_floats = (0..n).try_fold(0usize, |acc, i| {
        let t = header.trace_lengths[i];
        t.checked_mul(d)
            .and_then(|s| s.checked_add(if header.has_state_semantics[i] { t } else { 0 }))
            .and_then(|s| s.checked_add(usize::from(header.has_trace_label[i])))
            .and_then(|s| acc.checked_add(s))
    });
    let payload = &bytes[header_end..];
    match expected_floats.and_then(|f| f.checked_mul(4)) {
        Some(expected) if expected == payload.len() => {}
        Some(expected) => {
            return Err(Error::ShapeMismatch(format!(
                "header declares {expected} payload bytes, file holds {}",
                payload.len()
            )))
        }
        None => return Err(Error::CorruptHeader("declared shape overflows".into())),
    }

    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut traces = Vec::with_capacity(n);
    for i in 0..n {
        let t = header.trace_lengths[i];
        let states: Vec<f32> = floats.by_ref().take(t * d).collect();
        let states = Array2::from_shape_vec((t, d), states)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let state_semantics =
            header.has_state_semantics[i].then(|| floats.by_ref().take(t).collect::<Vec<f32>>());
        let trace_label = if header.has_trace_label[i] {
            floats.next()
        } else {
            None
        };
        traces.push(Trace {
            states,
            state_semantics,
            trace_label,
        });
    }
    TraceContainer::with_metadata(d, traces, header.metadata)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TraceContainer> {
    let bytes = fs::read(path)?;
    decode_container(&bytes)
}

pub fn write_container(container: &TraceContainer, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_container(container)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(())
}

/// Copies each trace label to every position of traces lacking per-token semantics.
pub fn broadcast_labels(container: &TraceContainer) -> Result<TraceContainer> {
    let mut traces = container.traces.clone();
    for (i, trace) in traces.iter_mut().enumerate() {
        if trace.state_semantics.is_some() {
            continue;
        }
        let label = trace.trace_label.ok_or(Error::MissingLabel(i))?;
        trace.state_semantics = Some(vec![label; trace.len()]);
    }
    Ok(TraceContainer {
        hidden_dim: container.hidden_dim,
        traces,
        metadata: container.metadata.clone(),
    })
}

/// Disjoint train/test index sets over a container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.train_indices.is_empty() || self.test_indices.is_empty() {
            return Err(Error::EmptyInput("split sides must be non-empty".into()));
        }
        let mut seen = BTreeSet::new();
        for &index in &self.train_indices {
            if index >= len {
                return Err(Error::IndexOutOfRange { index, len });
            }
            seen.insert(index);
        }
        for &index in &self.test_indices {
            if index >= len {
                return Err(Error::IndexOutOfRange { index, len });
            }
            if seen.contains(&index) {
                return Err(Error::Overlap(index));
            }
        }
        Ok(())
    }
}

pub fn split(container: &TraceContainer, spec: &SplitSpec) -> Result<(TraceSet, TraceSet)> {
    spec.validate(container.len())?;
    let pick = |indices: &[usize]| TraceContainer {
        hidden_dim: container.hidden_dim,
        traces: indices
            .iter()
            .map(|&i| container.traces[i].clone())
            .collect(),
        metadata: container.metadata.clone(),
    };
    Ok((pick(&spec.train_indices), pick(&spec.test_indices)))
}
