//! Events, mark spaces and time-sorted datasets.
//!
//! An event is a timestamp plus a mark. Marks come in three shapes: a binary
//! feature vector over `F` named features, a single categorical label out of
//! `L`, or a composite of a label and the graph node the event occurred on.
//!
//! Datasets are read from and written to JSON Lines. The optional first line
//! is a header object carrying the horizon and the mark schema:
//!
//! ```text
//! {"T": 10.0, "schema": {"features": ["buy", "link"]}}
//! {"t": 0.5, "x": [0]}
//! {"t": 1.25, "x": []}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Sorted set of active feature indices over a fixed width.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSet {
    width: usize,
    active: Vec<u32>,
}

impl FeatureSet {
    pub fn new(width: usize, active: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut active: Vec<u32> = active
            .into_iter()
            .map(|i| {
                if i >= width {
                    Err(Error::param(format!("feature index {i} >= width {width}")))
                } else {
                    Ok(i as u32)
                }
            })
            .collect::<Result<_>>()?;
        active.sort_unstable();
        active.dedup();
        Ok(Self { width, active })
    }

    /// Builds a set from a dense 0/1 slice.
    pub fn from_bits(bits: &[bool]) -> Self {
        let active = bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i as u32)
            .collect();
        Self { width: bits.len(), active }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn active(&self) -> impl ExactSizeIterator<Item = usize> + '_ {
        self.active.iter().map(|&i| i as usize)
    }

    pub fn contains(&self, i: usize) -> bool {
        self.active.binary_search(&(i as u32)).is_ok()
    }

    /// Dense 0/1 view, index by index.
    pub fn bits(&self) -> Vec<bool> {
        let mut out = vec![false; self.width];
        for i in self.active() {
            out[i] = true;
        }
        out
    }
}

/// Index of a node in the dataset's node table.
pub type NodeId = u32;

/// Feature payload attached to an event.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mark {
    Features(FeatureSet),
    /// Zero-based label in `0..L`.
    Label(u32),
    /// Label over a small type space plus the node the event happened on.
    Composite { label: u32, node: NodeId },
}

impl Mark {
    pub fn label(&self) -> Option<usize> {
        match self {
            Mark::Label(l) | Mark::Composite { label: l, .. } => Some(*l as usize),
            Mark::Features(_) => None,
        }
    }

    pub fn node(&self) -> Option<NodeId> {
        match self {
            Mark::Composite { node, .. } => Some(*node),
            _ => None,
        }
    }

    pub fn features(&self) -> Option<&FeatureSet> {
        match self {
            Mark::Features(f) => Some(f),
            _ => None,
        }
    }

    /// Indicator of coordinate `i` when the mark is read as a binary vector.
    /// Labels behave as one-hot vectors.
    pub fn is_active(&self, i: usize) -> bool {
        match self {
            Mark::Features(f) => f.contains(i),
            Mark::Label(l) | Mark::Composite { label: l, .. } => *l as usize == i,
        }
    }

    /// Active coordinates of the binary reading of the mark, ascending.
    pub fn active(&self) -> Box<dyn Iterator<Item = usize> + '_> {
        match self {
            Mark::Features(f) => Box::new(f.active()),
            Mark::Label(l) | Mark::Composite { label: l, .. } => {
                Box::new(std::iter::once(*l as usize))
            }
        }
    }

    /// Same mark with a different label; feature marks are returned unchanged.
    pub fn with_label(&self, label: usize) -> Mark {
        match self {
            Mark::Label(_) => Mark::Label(label as u32),
            Mark::Composite { node, .. } => Mark::Composite { label: label as u32, node: *node },
            Mark::Features(_) => self.clone(),
        }
    }
}

/// Declared mark space of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MarkSchema {
    Features { names: Vec<String> },
    Labels { count: usize },
    Composite { types: usize, nodes: Vec<String> },
}

impl MarkSchema {
    pub fn features(count: usize) -> Self {
        MarkSchema::Features {
            names: (0..count).map(|i| format!("f{i}")).collect(),
        }
    }

    /// Number of coordinates of the binary reading of a mark (`F` or `L`).
    pub fn width(&self) -> usize {
        match self {
            MarkSchema::Features { names } => names.len(),
            MarkSchema::Labels { count } => *count,
            MarkSchema::Composite { types, .. } => *types,
        }
    }

    pub fn is_categorical(&self) -> bool {
        !matches!(self, MarkSchema::Features { .. })
    }

    pub fn node_name(&self, id: NodeId) -> Option<&str> {
        match self {
            MarkSchema::Composite { nodes, .. } => nodes.get(id as usize).map(String::as_str),
            _ => None,
        }
    }

    pub fn check(&self, mark: &Mark) -> Result<()> {
        match (self, mark) {
            (MarkSchema::Features { names }, Mark::Features(f)) if f.width() == names.len() => {
                Ok(())
            }
            (MarkSchema::Labels { count }, Mark::Label(l)) if (*l as usize) < *count => Ok(()),
            (MarkSchema::Composite { types, nodes }, Mark::Composite { label, node })
                if (*label as usize) < *types && (*node as usize) < nodes.len() =>
            {
                Ok(())
            }
            _ => Err(Error::schema(format!("mark {mark:?} does not fit schema"))),
        }
    }

    /// Same kind and width; node tables are not compared.
    fn compatible(&self, other: &MarkSchema) -> bool {
        match (self, other) {
            (MarkSchema::Features { names: a }, MarkSchema::Features { names: b }) => {
                a.len() == b.len()
            }
            (MarkSchema::Labels { count: a }, MarkSchema::Labels { count: b }) => a == b,
            (MarkSchema::Composite { types: a, .. }, MarkSchema::Composite { types: b, .. }) => {
                a == b
            }
            _ => false,
        }
    }

    fn header_json(&self) -> Value {
        match self {
            MarkSchema::Features { names } => json!({ "features": names }),
            MarkSchema::Labels { count } => json!({ "labels": count }),
            MarkSchema::Composite { types, .. } => json!({ "types": types, "nodes": true }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: f64,
    pub mark: Mark,
}

impl Event {
    pub fn new(t: f64, mark: Mark) -> Self {
        Self { t, mark }
    }
}

/// Time-sorted events observed over the window `[start, horizon]`.
///
/// An event's id is its position in the sorted sequence; equal timestamps
/// keep their insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    events: Vec<Event>,
    start: f64,
    horizon: f64,
    schema: MarkSchema,
}

/// Caller-side expectations for [`Dataset::ingest`].
#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Required when the file has no header schema; must agree with it otherwise.
    pub schema: Option<MarkSchema>,
    /// Node table of the companion graph. Composite records naming other nodes
    /// are rejected. Without it the table is built in order of first appearance.
    pub nodes: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(events: Vec<Event>, horizon: f64, schema: MarkSchema) -> Result<Self> {
        Self::with_window(events, 0.0, horizon, schema)
    }

    pub fn with_window(
        mut events: Vec<Event>,
        start: f64,
        horizon: f64,
        schema: MarkSchema,
    ) -> Result<Self> {
        if !(start.is_finite() && horizon.is_finite() && start >= 0.0 && horizon >= start) {
            return Err(Error::param(format!("invalid window [{start}, {horizon}]")));
        }
        for (i, e) in events.iter().enumerate() {
            if !e.t.is_finite() || e.t < start || e.t > horizon {
                return Err(Error::Timestamp { line: i + 1, t: e.t, horizon });
            }
            schema.check(&e.mark)?;
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Self { events, start, horizon, schema })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn duration(&self) -> f64 {
        self.horizon - self.start
    }

    pub fn schema(&self) -> &MarkSchema {
        &self.schema
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// Temporal split at `fraction * T`: train keeps `[start, cut]`, test
    /// keeps `(cut, T]`. An event exactly at the cut goes to train.
    pub fn split(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::param(format!("split fraction {fraction} not in (0, 1)")));
        }
        let cut = fraction * self.horizon;
        let at = self.events.partition_point(|e| e.t <= cut);
        let train = Dataset {
            events: self.events[..at].to_vec(),
            start: self.start,
            horizon: cut,
            schema: self.schema.clone(),
        };
        let test = Dataset {
            events: self.events[at..].to_vec(),
            start: cut,
            horizon: self.horizon,
            schema: self.schema.clone(),
        };
        Ok((train, test))
    }

    pub fn ingest(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        Self::read(BufReader::new(file), opts)
    }

    pub fn read(reader: impl BufRead, opts: &IngestOptions) -> Result<Self> {
        let mut horizon: Option<f64> = None;
        let mut schema = opts.schema.clone();
        let mut nodes: Vec<String> = opts.nodes.clone().unwrap_or_default();
        let mut events = Vec::new();
        let mut first = true;

        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let obj = value.as_object().ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected a JSON object".into(),
            })?;
            let is_first = std::mem::replace(&mut first, false);
            if is_first && !obj.contains_key("t") {
                let (h, declared) = parse_header(obj, line_no)?;
                horizon = h;
                if let Some(declared) = declared {
                    match &schema {
                        Some(expected) if !expected.compatible(&declared) => {
                            return Err(Error::schema(format!(
                                "file declares {declared:?}, caller expects {expected:?}"
                            )))
                        }
                        Some(_) => {}
                        None => schema = Some(declared),
                    }
                }
                continue;
            }
            let schema = schema.as_ref().ok_or_else(|| {
                Error::schema("no mark schema: file has no header and none was supplied")
            })?;
            let t = obj
                .get("t")
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::Parse { line: line_no, message: "missing numeric `t`".into() })?;
            if !t.is_finite() || t < 0.0 || horizon.is_some_and(|h| t > h) {
                return Err(Error::Timestamp { line: line_no, t, horizon: horizon.unwrap_or(f64::INFINITY) });
            }
            let mark = parse_mark(obj, schema, &mut nodes, opts.nodes.is_some(), line_no)?;
            events.push(Event { t, mark });
        }

        let mut schema = schema.ok_or_else(|| Error::schema("no mark schema declared"))?;
        if let MarkSchema::Composite { nodes: table, .. } = &mut schema {
            *table = nodes;
        }
        let horizon = match horizon {
            Some(h) => h,
            None => {
                let max = events.iter().map(|e| e.t).fold(f64::NAN, f64::max);
                if max.is_nan() {
                    return Err(Error::schema("empty file without a horizon in its header"));
                }
                log::warn!("no horizon declared; using the last timestamp {max}");
                max
            }
        };
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::param(format!("horizon {horizon} must be positive")));
        }
        Dataset::new(events, horizon, schema)
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let header = json!({ "T": self.horizon, "schema": self.schema.header_json() });
        writeln!(w, "{header}")?;
        for e in &self.events {
            let rec = match &e.mark {
                Mark::Features(f) => json!({ "t": e.t, "x": f.active().collect::<Vec<_>>() }),
                Mark::Label(l) => json!({ "t": e.t, "label": l }),
                Mark::Composite { label, node } => {
                    let name = self.schema.node_name(*node).unwrap_or_default();
                    json!({ "t": e.t, "type": label, "node": name })
                }
            };
            writeln!(w, "{rec}")?;
        }
        Ok(())
    }

    pub fn emit(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn parse_header(obj: &Map<String, Value>, line: usize) -> Result<(Option<f64>, Option<MarkSchema>)> {
    let bad = |m: &str| Error::Parse { line, message: m.to_string() };
    let horizon = match obj.get("T") {
        None => None,
        Some(v) => Some(v.as_f64().ok_or_else(|| bad("header `T` must be a number"))?),
    };
    let schema = match obj.get("schema") {
        None => None,
        Some(Value::Object(s)) => {
            if let Some(names) = s.get("features") {
                let names = names
                    .as_array()
                    .ok_or_else(|| bad("`features` must be a list of names"))?
                    .iter()
                    .map(|n| n.as_str().map(str::to_owned).ok_or_else(|| bad("feature names must be strings")))
                    .collect::<Result<Vec<_>>>()?;
                Some(MarkSchema::Features { names })
            } else if let Some(l) = s.get("labels") {
                let count = l.as_u64().ok_or_else(|| bad("`labels` must be a count"))? as usize;
                Some(MarkSchema::Labels { count })
            } else if let Some(l) = s.get("types") {
                let types = l.as_u64().ok_or_else(|| bad("`types` must be a count"))? as usize;
                Some(MarkSchema::Composite { types, nodes: Vec::new() })
            } else {
                return Err(bad("unrecognised schema"));
            }
        }
        Some(_) => return Err(bad("`schema` must be an object")),
    };
    Ok((horizon, schema))
}

fn parse_mark(
    obj: &Map<String, Value>,
    schema: &MarkSchema,
    nodes: &mut Vec<String>,
    closed_nodes: bool,
    line: usize,
) -> Result<Mark> {
    let bad = |m: &str| Error::Parse { line, message: m.to_string() };
    let index = |key: &str| -> Result<usize> {
        obj.get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| bad(&format!("missing integer `{key}`")))
    };
    match schema {
        MarkSchema::Features { names } => {
            let width = names.len();
            let xs = obj
                .get("x")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing feature list `x`"))?;
            let mut active = Vec::with_capacity(xs.len());
            for v in xs {
                let i = v.as_u64().ok_or_else(|| bad("feature indices must be integers"))? as usize;
                if i >= width {
                    return Err(Error::FeatureIndex { line, index: i, width });
                }
                active.push(i);
            }
            Ok(Mark::Features(FeatureSet::new(width, active)?))
        }
        MarkSchema::Labels { count } => {
            let l = index("label")?;
            if l >= *count {
                return Err(Error::LabelIndex { line, label: l, count: *count });
            }
            Ok(Mark::Label(l as u32))
        }
        MarkSchema::Composite { types, .. } => {
            let l = index("type")?;
            if l >= *types {
                return Err(Error::LabelIndex { line, label: l, count: *types });
            }
            let name = obj
                .get("node")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("missing string `node`"))?;
            let node = match nodes.iter().position(|n| n == name) {
                Some(p) => p,
                None if closed_nodes => {
                    return Err(Error::UnknownNode { node: name.to_owned(), line: Some(line) })
                }
                None => {
                    nodes.push(name.to_owned());
                    nodes.len() - 1
                }
            };
            Ok(Mark::Composite { label: l as u32, node: node as NodeId })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str, opts: &IngestOptions) -> Result<Dataset> {
        Dataset::read(text.as_bytes(), opts)
    }

    fn times(d: &Dataset) -> Vec<f64> {
        d.events().iter().map(|e| e.t).collect()
    }

    #[test]
    fn ingest_sorts_by_time() {
        let d = read(
            "{\"T\": 5, \"schema\": {\"labels\": 2}}\n{\"t\": 2.0, \"label\": 0}\n{\"t\": 1.0, \"label\": 1}\n",
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(times(&d), vec![1.0, 2.0]);
        assert_eq!(d.events()[0].mark, Mark::Label(1));
    }

    #[test]
    fn ties_keep_file_order() {
        let d = read(
            "{\"T\": 5, \"schema\": {\"labels\": 3}}\n{\"t\": 1.0, \"label\": 2}\n{\"t\": 1.0, \"label\": 0}\n{\"t\": 0.5, \"label\": 1}\n",
            &IngestOptions::default(),
        )
        .unwrap();
        let labels: Vec<_> = d.events().iter().map(|e| e.mark.label().unwrap()).collect();
        assert_eq!(labels, vec![1, 2, 0]);
    }

    #[test]
    fn empty_file_with_header() {
        let d = read("{\"T\": 10, \"schema\": {\"labels\": 2}}\n", &IngestOptions::default()).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.horizon(), 10.0);
    }

    #[test]
    fn feature_index_out_of_range_names_line() {
        let err = read(
            "{\"T\": 5, \"schema\": {\"features\": [\"a\", \"b\"]}}\n{\"t\": 1, \"x\": [0]}\n{\"t\": 2, \"x\": [2]}\n",
            &IngestOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::FeatureIndex { line, index, width } => {
                assert_eq!((line, index, width), (3, 2, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_to_string_has_line(
            read("{\"T\": 5, \"schema\": {\"labels\": 2}}\n{\"t\": 1, \"label\": }\n", &IngestOptions::default())
                .unwrap_err(),
            2
        ));
    }

    fn err_to_string_has_line(e: Error, line: usize) -> bool {
        e.to_string().contains(&format!("line {line}"))
    }

    #[test]
    fn negative_timestamp_rejected() {
        let err = read("{\"T\": 5, \"schema\": {\"labels\": 2}}\n{\"t\": -1, \"label\": 0}\n", &IngestOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Timestamp { line: 2, .. }));
    }

    #[test]
    fn missing_horizon_defaults_to_last_timestamp() {
        let opts = IngestOptions { schema: Some(MarkSchema::Labels { count: 2 }), nodes: None };
        let d = read("{\"t\": 3.5, \"label\": 0}\n{\"t\": 1.0, \"label\": 1}\n", &opts).unwrap();
        assert_eq!(d.horizon(), 3.5);
    }

    #[test]
    fn unknown_node_rejected_with_graph_table() {
        let opts = IngestOptions { schema: None, nodes: Some(vec!["A".into(), "B".into()]) };
        let text = "{\"T\": 5, \"schema\": {\"types\": 2, \"nodes\": true}}\n{\"t\": 1, \"type\": 0, \"node\": \"A\"}\n{\"t\": 2, \"type\": 1, \"node\": \"C\"}\n";
        let err = read(text, &opts).unwrap_err();
        assert!(matches!(err, Error::UnknownNode { ref node, line: Some(3) } if node == "C"));
    }

    #[test]
    fn schema_mismatch_with_caller() {
        let opts = IngestOptions { schema: Some(MarkSchema::Labels { count: 3 }), nodes: None };
        let err = read("{\"T\": 5, \"schema\": {\"labels\": 2}}\n", &opts).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    fn sample() -> Dataset {
        let events = [1.0, 2.0, 3.0, 9.0].iter().map(|&t| Event::new(t, Mark::Label(0))).collect();
        Dataset::new(events, 10.0, MarkSchema::Labels { count: 1 }).unwrap()
    }

    #[test]
    fn split_at_fraction_of_horizon() {
        let (train, test) = sample().split(0.8).unwrap();
        assert_eq!(times(&train), vec![1.0, 2.0, 3.0]);
        assert_eq!(times(&test), vec![9.0]);
        assert_eq!(train.horizon(), 8.0);
        assert_eq!((test.start(), test.horizon()), (8.0, 10.0));
    }

    #[test]
    fn split_boundary_event_goes_to_train() {
        let (train, test) = sample().split(0.3).unwrap();
        assert_eq!(times(&train), vec![1.0, 2.0, 3.0]);
        assert_eq!(times(&test), vec![9.0]);
    }

    #[test]
    fn split_empty_dataset() {
        let d = Dataset::new(vec![], 10.0, MarkSchema::Labels { count: 1 }).unwrap();
        let (train, test) = d.split(0.8).unwrap();
        assert!(train.is_empty() && test.is_empty());
        assert_eq!(train.horizon(), 8.0);
        assert_eq!((test.start(), test.horizon()), (8.0, 10.0));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(sample().split(0.0).is_err());
        assert!(sample().split(1.0).is_err());
    }

    #[test]
    fn composite_round_trip_keeps_node_names() {
        let opts = IngestOptions::default();
        let text = "{\"T\": 5, \"schema\": {\"types\": 2, \"nodes\": true}}\n{\"t\": 1, \"type\": 1, \"node\": \"B\"}\n{\"t\": 2, \"type\": 0, \"node\": \"A\"}\n";
        let d = read(text, &opts).unwrap();
        let mut buf = Vec::new();
        d.write(&mut buf).unwrap();
        let back = read(std::str::from_utf8(&buf).unwrap(), &opts).unwrap();
        assert_eq!(back, d);
    }
}
