//! Annotated example pools: ingestion, validation, splitting and noise
//! simulation.
//!
//! Ground-truth noise flags live beside the examples, never inside them.
//! Selectors and the ranking filter only ever see a [`Pool`], which has no
//! path to the flags; evaluation code reaches them through
//! [`Dataset::ground_truth`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("example {id:?} has an empty `{field}` field")]
    EmptyField { id: String, field: &'static str },
    #[error("is_noisy must be given for every record or for none (line {line})")]
    InconsistentNoiseFlags { line: usize },
    #[error("donor dataset has no outputs to draw from")]
    DonorTooSmall,
    #[error("donor task {0:?} is the same as the pool task")]
    SameTask(String),
    #[error("sampled id {0:?} has no entry in the corruption import file")]
    MissingCorruption(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid noise spec: {0}")]
    InvalidSpec(String),
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("pool and test splits share id {0:?}")]
    OverlappingSplits(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// One annotated input/output pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub task: String,
    pub input_text: String,
    pub output_text: String,
    pub meta: BTreeMap<String, String>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        task: impl Into<String>,
        input_text: impl Into<String>,
        output_text: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            task: task.into(),
            input_text: input_text.into(),
            output_text: output_text.into(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(CorpusError::EmptyField { id: String::new(), field: "id" });
        }
        if self.input_text.is_empty() {
            return Err(CorpusError::EmptyField { id: self.id.clone(), field: "input" });
        }
        if self.output_text.is_empty() {
            return Err(CorpusError::EmptyField { id: self.id.clone(), field: "output" });
        }
        Ok(())
    }
}

/// Wire form of one dataset line.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    task: String,
    input: String,
    output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    is_noisy: Option<bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pool,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Irrelevant,
    RelevantImport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor_task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub import_path: Option<PathBuf>,
}

impl NoiseSpec {
    pub fn irrelevant(rate: f64, seed: u64) -> Self {
        Self { kind: NoiseKind::Irrelevant, rate, seed, donor_task: None, import_path: None }
    }

    pub fn relevant_import(rate: f64, seed: u64, path: impl Into<PathBuf>) -> Self {
        Self {
            kind: NoiseKind::RelevantImport,
            rate,
            seed,
            donor_task: None,
            import_path: Some(path.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) || self.rate.is_nan() {
            return Err(CorpusError::InvalidSpec(format!("rate {} outside [0, 1]", self.rate)));
        }
        if self.kind == NoiseKind::RelevantImport && self.import_path.is_none() {
            return Err(CorpusError::InvalidSpec("relevant_import requires import_path".into()));
        }
        Ok(())
    }
}

/// Number of examples corrupted at `rate` over `n` examples (round half up).
pub fn noise_count(rate: f64, n: usize) -> usize {
    // The epsilon absorbs products such as 0.15 * 10 landing just under .5.
    let count = (rate * n as f64 + 0.5 + 1e-9).floor() as usize;
    count.min(n)
}

/// Indices chosen for corruption, in ascending order.
///
/// Exposed so callers can tell in advance which examples a seed will hit.
pub fn sample_noise_indices(n: usize, rate: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n, noise_count(rate, n)).into_vec();
    picked.sort_unstable();
    picked
}

/// Ground-truth noise flags of a dataset, for evaluation and simulation only.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    dataset: &'a Dataset,
    flags: &'a [bool],
}

impl<'a> GroundTruth<'a> {
    pub fn is_noisy(&self, id: &str) -> Option<bool> {
        self.dataset.position(id).map(|i| self.flags[i])
    }

    pub fn noisy_count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    pub fn noisy_ids(&self) -> impl Iterator<Item = &'a str> + '_ {
        self.dataset
            .examples
            .iter()
            .zip(self.flags)
            .filter(|(_, f)| **f)
            .map(|(e, _)| e.id.as_str())
    }
}

/// Read-only view of a dataset's examples without any access to noise flags.
#[derive(Debug, Clone, Copy)]
pub struct Pool<'a> {
    examples: &'a [Example],
    by_id: &'a HashMap<String, usize>,
}

impl<'a> Pool<'a> {
    pub fn examples(&self) -> &'a [Example] {
        self.examples
    }

    pub fn get(&self, id: &str) -> Option<&'a Example> {
        self.by_id.get(id).map(|&i| &self.examples[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &'a str> {
        self.examples.iter().map(|e| e.id.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    examples: Vec<Example>,
    by_id: HashMap<String, usize>,
    noise: Option<Vec<bool>>,
    pub split: Split,
    pub noise_spec: Option<NoiseSpec>,
}

impl Dataset {
    /// Builds a validated dataset without noise flags.
    pub fn new(examples: Vec<Example>, split: Split) -> Result<Self> {
        Self::build(examples, None, split)
    }

    /// Builds a validated dataset carrying ground-truth flags, one per example.
    pub fn with_ground_truth(examples: Vec<Example>, flags: Vec<bool>, split: Split) -> Result<Self> {
        assert_eq!(examples.len(), flags.len(), "one flag per example");
        Self::build(examples, Some(flags), split)
    }

    fn build(examples: Vec<Example>, noise: Option<Vec<bool>>, split: Split) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            ex.validate()?;
            if by_id.insert(ex.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Self { examples, by_id, noise, split, noise_spec: None })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.position(id).map(|i| &self.examples[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn pool(&self) -> Pool<'_> {
        Pool { examples: &self.examples, by_id: &self.by_id }
    }

    pub fn ground_truth(&self) -> Option<GroundTruth<'_>> {
        self.noise.as_deref().map(|flags| GroundTruth { dataset: self, flags })
    }

    /// Distinct task tags, sorted.
    pub fn tasks(&self) -> Vec<&str> {
        let mut tasks: Vec<&str> = self.examples.iter().map(|e| e.task.as_str()).collect();
        tasks.sort_unstable();
        tasks.dedup();
        tasks
    }

    pub fn from_jsonl_reader<R: BufRead>(reader: R, split: Split) -> Result<Self> {
        let mut examples = Vec::new();
        let mut flags: Vec<Option<bool>> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
            if let Some(first) = flags.first() {
                if first.is_some() != rec.is_noisy.is_some() {
                    return Err(CorpusError::InconsistentNoiseFlags { line: line_no });
                }
            }
            flags.push(rec.is_noisy);
            examples.push(Example {
                id: rec.id,
                task: rec.task,
                input_text: rec.input,
                output_text: rec.output,
                meta: rec.meta,
            });
        }
        let noise = if flags.first().is_some_and(|f| f.is_some()) {
            Some(flags.into_iter().map(|f| f.unwrap_or(false)).collect())
        } else {
            None
        };
        Self::build(examples, noise, split)
    }

    /// Writes one JSON object per line, LF-terminated, in example order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            let rec = Record {
                id: ex.id.clone(),
                task: ex.task.clone(),
                input: ex.input_text.clone(),
                output: ex.output_text.clone(),
                is_noisy: self.noise.as_ref().map(|f| f[i]),
                meta: ex.meta.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
        let mut file = std::io::BufWriter::new(File::create(path).map_err(io_err)?);
        self.write_jsonl(&mut file).map_err(io_err)?;
        file.flush().map_err(io_err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
    /// A single JSON array of records.
    JsonArray,
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io_err)?;
    match format {
        DatasetFormat::Jsonl => Dataset::from_jsonl_reader(BufReader::new(file), Split::Pool),
        DatasetFormat::JsonArray => {
            let mut text = String::new();
            BufReader::new(file).read_to_string(&mut text).map_err(io_err)?;
            let values: Vec<serde_json::Value> = serde_json::from_str(&text)
                .map_err(|e| CorpusError::Parse { line: e.line(), message: e.to_string() })?;
            let mut lines = String::new();
            for v in values {
                lines.push_str(&v.to_string());
                lines.push('\n');
            }
            Dataset::from_jsonl_reader(lines.as_bytes(), Split::Pool)
        }
    }
}

fn check_rate(spec: &NoiseSpec, expected: NoiseKind) -> Result<()> {
    spec.validate()?;
    if spec.kind != expected {
        return Err(CorpusError::InvalidSpec(format!("expected kind {expected:?}, got {:?}", spec.kind)));
    }
    Ok(())
}

fn corrupted(pool: &Dataset, replacements: &[(usize, String)], spec: &NoiseSpec) -> Result<Dataset> {
    let mut examples = pool.examples.clone();
    let mut flags = vec![false; examples.len()];
    for (i, output) in replacements {
        examples[*i].output_text = output.clone();
        flags[*i] = true;
    }
    let mut out = Dataset::build(examples, Some(flags), pool.split)?;
    out.noise_spec = Some(spec.clone());
    Ok(out)
}

/// Replaces `round(rate * N)` outputs with outputs drawn from another task.
///
/// Donor outputs are drawn without replacement until the donor runs dry, then
/// with replacement.
pub fn inject_irrelevant_noise(pool: &Dataset, donor: &Dataset, spec: &NoiseSpec) -> Result<Dataset> {
    check_rate(spec, NoiseKind::Irrelevant)?;
    let pool_tasks: HashSet<&str> = pool.tasks().into_iter().collect();
    let donor_outputs: Vec<&str> = donor
        .examples
        .iter()
        .filter(|e| spec.donor_task.as_deref().is_none_or(|t| e.task == t))
        .map(|e| e.output_text.as_str())
        .collect();
    if let Some(t) = &spec.donor_task {
        if pool_tasks.contains(t.as_str()) {
            return Err(CorpusError::SameTask(t.clone()));
        }
    }
    if let Some(shared) = donor.tasks().into_iter().find(|t| pool_tasks.contains(t)) {
        if spec.donor_task.is_none() {
            return Err(CorpusError::SameTask(shared.to_string()));
        }
    }

    let n = pool.len();
    let victims = sample_noise_indices(n, spec.rate, spec.seed);
    if victims.is_empty() {
        return corrupted(pool, &[], spec);
    }
    if donor_outputs.is_empty() {
        return Err(CorpusError::DonorTooSmall);
    }

    // Separate stream from the victim draw so victim choice is independent
    // of donor size.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..donor_outputs.len()).collect();
    order.shuffle(&mut rng);
    let replacements: Vec<(usize, String)> = victims
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let d = if j < order.len() { order[j] } else { rng.random_range(0..donor_outputs.len()) };
            (i, donor_outputs[d].to_string())
        })
        .collect();
    corrupted(pool, &replacements, spec)
}

#[derive(Debug, Deserialize)]
struct CorruptionRecord {
    id: String,
    corrupted_output: String,
}

/// Parses a relevant-noise import file: one `{id, corrupted_output}` per line.
pub fn read_corruptions<R: BufRead>(reader: R) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorruptionRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
        if map.insert(rec.id.clone(), rec.corrupted_output).is_some() {
            return Err(CorpusError::DuplicateId(rec.id));
        }
    }
    Ok(map)
}

/// Applies externally generated "relevant yet wrong" outputs read from
/// `spec.import_path`.
pub fn import_relevant_noise(pool: &Dataset, spec: &NoiseSpec) -> Result<Dataset> {
    check_rate(spec, NoiseKind::RelevantImport)?;
    let path = spec.import_path.as_deref().expect("validated above");
    let file = File::open(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let corruptions = read_corruptions(BufReader::new(file))?;
    apply_relevant_noise(pool, &corruptions, spec)
}

/// As [`import_relevant_noise`], with the corruption table already in memory.
pub fn apply_relevant_noise(
    pool: &Dataset,
    corruptions: &HashMap<String, String>,
    spec: &NoiseSpec,
) -> Result<Dataset> {
    spec.validate()?;
    let victims = sample_noise_indices(pool.len(), spec.rate, spec.seed);
    let replacements = victims
        .into_iter()
        .map(|i| {
            let id = &pool.examples[i].id;
            corruptions
                .get(id)
                .map(|out| (i, out.clone()))
                .ok_or_else(|| CorpusError::MissingCorruption(id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    corrupted(pool, &replacements, spec)
}

/// Seeded disjoint split into (pool, test). Both sides keep the input order.
pub fn split_pool(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(test_fraction));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(CorpusError::EmptyDataset);
    }
    let n_test = noise_count(test_fraction, n).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; n];
    for i in sample(&mut rng, n, n_test) {
        is_test[i] = true;
    }

    let mut parts = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    for (i, ex) in dataset.examples.iter().enumerate() {
        let (examples, flags) = &mut parts[is_test[i] as usize];
        examples.push(ex.clone());
        flags.push(dataset.noise.as_ref().is_some_and(|f| f[i]));
    }
    let [(pool_ex, pool_flags), (test_ex, test_flags)] = parts;
    let make = |examples, flags, split| {
        let noise = dataset.noise.as_ref().map(|_| flags);
        let mut d = Dataset::build(examples, noise, split)?;
        d.noise_spec = dataset.noise_spec.clone();
        Ok::<_, CorpusError>(d)
    };
    Ok((make(pool_ex, pool_flags, Split::Pool)?, make(test_ex, test_flags, Split::Test)?))
}

/// Fails if any id appears in both splits.
pub fn check_disjoint(pool: &Dataset, test: &Dataset) -> Result<()> {
    match test.examples.iter().find(|e| pool.by_id.contains_key(&e.id)) {
        Some(e) => Err(CorpusError::OverlappingSplits(e.id.clone())),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pool(n: usize, task: &str) -> Dataset {
        let examples = (0..n)
            .map(|i| Example::new(format!("{task}-{i}"), task, format!("question {i}"), format!("answer {i}")))
            .collect();
        Dataset::new(examples, Split::Pool).unwrap()
    }

    fn parse(text: &str) -> Result<Dataset> {
        Dataset::from_jsonl_reader(text.as_bytes(), Split::Pool)
    }

    #[test]
    fn loads_three_records() {
        let text = r#"{"id":"a","task":"nq","input":"q1","output":"o1"}
{"id":"b","task":"nq","input":"q2","output":"o2"}
{"id":"c","task":"nq","input":"q3","output":"o3"}
"#;
        let ds = parse(text).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.ground_truth().is_none());
    }

    #[test]
    fn rejects_duplicate_id() {
        let text = r#"{"id":"q-7","task":"nq","input":"q1","output":"o1"}
{"id":"q-7","task":"nq","input":"q2","output":"o2"}"#;
        assert!(matches!(parse(text), Err(CorpusError::DuplicateId(id)) if id == "q-7"));
    }

    #[test]
    fn reports_line_of_malformed_record() {
        let text = "{\"id\":\"a\",\"task\":\"t\",\"input\":\"x\",\"output\":\"y\"}\n{\"id\":\"b\"}\n";
        assert!(matches!(parse(text), Err(CorpusError::Parse { line: 2, .. })));
    }

    #[test]
    fn rejects_empty_output() {
        let text = r#"{"id":"a","task":"t","input":"x","output":""}"#;
        assert!(matches!(parse(text), Err(CorpusError::EmptyField { field: "output", .. })));
    }

    #[test]
    fn nq_record_round_trips() {
        let line = r#"{"id":"nq-1","task":"nq","input":"The bundles of neurons in the cns are called?","output":"Nucleus"}"#;
        let ds = parse(line).unwrap();
        assert_eq!(ds.to_jsonl_string(), format!("{line}\n"));
    }

    #[test]
    fn flags_and_meta_round_trip() {
        let text = "{\"id\":\"a\",\"task\":\"t\",\"input\":\"x\",\"output\":\"y\",\"is_noisy\":true,\"meta\":{\"cluster\":\"3\"}}\n";
        let ds = parse(text).unwrap();
        assert_eq!(ds.ground_truth().unwrap().is_noisy("a"), Some(true));
        assert_eq!(ds.to_jsonl_string(), text);
    }

    #[test]
    fn mixed_noise_flags_rejected() {
        let text = r#"{"id":"a","task":"t","input":"x","output":"y","is_noisy":false}
{"id":"b","task":"t","input":"x","output":"y"}"#;
        assert!(matches!(parse(text), Err(CorpusError::InconsistentNoiseFlags { line: 2 })));
    }

    #[test]
    fn zero_rate_is_identity() {
        let p = pool(10, "nq");
        let d = pool(5, "webq");
        let out = inject_irrelevant_noise(&p, &d, &NoiseSpec::irrelevant(0.0, 3)).unwrap();
        assert_eq!(out.examples(), p.examples());
        assert_eq!(out.ground_truth().unwrap().noisy_count(), 0);
    }

    #[test]
    fn full_rate_replaces_everything() {
        let p = pool(10, "nq");
        let d = pool(20, "webq");
        let out = inject_irrelevant_noise(&p, &d, &NoiseSpec::irrelevant(1.0, 3)).unwrap();
        let truth = out.ground_truth().unwrap();
        assert_eq!(truth.noisy_count(), 10);
        for (a, b) in p.examples().iter().zip(out.examples()) {
            assert_eq!(a.input_text, b.input_text);
            assert!(b.output_text.starts_with("answer"));
            assert!(d.examples().iter().any(|e| e.output_text == b.output_text));
        }
        // Donor is large enough, so no donor output repeats.
        let distinct: HashSet<_> = out.examples().iter().map(|e| &e.output_text).collect();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn large_pool_count_and_replay() {
        let p = pool(20_000, "nq");
        let d = pool(500, "webq");
        let spec = NoiseSpec::irrelevant(0.4, 11);
        let a = inject_irrelevant_noise(&p, &d, &spec).unwrap();
        let scanned = a.ground_truth().unwrap().noisy_ids().count();
        assert_eq!(scanned, 8000);
        let b = inject_irrelevant_noise(&p, &d, &spec).unwrap();
        assert_eq!(a.to_jsonl_string(), b.to_jsonl_string());
    }

    #[test]
    fn same_task_donor_rejected() {
        let p = pool(4, "nq");
        assert!(matches!(
            inject_irrelevant_noise(&p, &pool(4, "nq"), &NoiseSpec::irrelevant(0.5, 1)),
            Err(CorpusError::SameTask(_))
        ));
    }

    #[test]
    fn empty_donor_rejected() {
        let p = pool(4, "nq");
        let empty = Dataset::new(vec![], Split::Pool).unwrap();
        assert!(matches!(
            inject_irrelevant_noise(&p, &empty, &NoiseSpec::irrelevant(0.5, 1)),
            Err(CorpusError::DonorTooSmall)
        ));
    }

    #[test]
    fn invalid_rate_rejected() {
        let p = pool(4, "nq");
        assert!(matches!(
            inject_irrelevant_noise(&p, &pool(4, "x"), &NoiseSpec::irrelevant(1.2, 1)),
            Err(CorpusError::InvalidSpec(_))
        ));
    }

    #[test]
    fn relevant_noise_sciq_example() {
        let ex = Example::new(
            "sciq-1",
            "sciq",
            "Support: Cells are organized into tissues, tissues are organized into organs.\nQuestion: What is considered the smallest unit of the organ?",
            "Cells",
        );
        let p = Dataset::new(vec![ex], Split::Pool).unwrap();
        let corruptions = HashMap::from([("sciq-1".to_string(), "tissues".to_string())]);
        let spec = NoiseSpec::relevant_import(1.0, 0, "unused");
        let out = apply_relevant_noise(&p, &corruptions, &spec).unwrap();
        assert_eq!(out.examples()[0].output_text, "tissues");
        assert_eq!(out.examples()[0].input_text, p.examples()[0].input_text);
        assert_eq!(out.ground_truth().unwrap().is_noisy("sciq-1"), Some(true));
    }

    #[test]
    fn relevant_zero_rate_unchanged() {
        let p = pool(5, "sciq");
        let out = apply_relevant_noise(&p, &HashMap::new(), &NoiseSpec::relevant_import(0.0, 4, "x")).unwrap();
        assert_eq!(out.examples(), p.examples());
    }

    #[test]
    fn relevant_missing_corruption_names_id() {
        let p = pool(5, "sciq");
        let seed = 21;
        let victims = sample_noise_indices(5, 0.2, seed);
        assert_eq!(victims.len(), 1);
        let missing = p.examples()[victims[0]].id.clone();
        let corruptions: HashMap<String, String> = p
            .examples()
            .iter()
            .filter(|e| e.id != missing)
            .map(|e| (e.id.clone(), "wrong".to_string()))
            .collect();
        assert_eq!(corruptions.len(), 4);
        let err = apply_relevant_noise(&p, &corruptions, &NoiseSpec::relevant_import(0.2, seed, "x")).unwrap_err();
        assert!(matches!(err, CorpusError::MissingCorruption(id) if id == missing));
    }

    #[test]
    fn import_file_parsed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noise.jsonl");
        std::fs::write(&path, "{\"id\":\"sciq-0\",\"corrupted_output\":\"tissues\"}\n").unwrap();
        let p = pool(1, "sciq");
        let out = import_relevant_noise(&p, &NoiseSpec::relevant_import(1.0, 0, &path)).unwrap();
        assert_eq!(out.examples()[0].output_text, "tissues");
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = pool(100, "nq");
        let (a, b) = split_pool(&ds, 0.2, 5).unwrap();
        assert_eq!((a.len(), b.len()), (80, 20));
        check_disjoint(&a, &b).unwrap();
        let (c, d) = split_pool(&ds, 0.2, 5).unwrap();
        assert_eq!(a.examples(), c.examples());
        assert_eq!(b.examples(), d.examples());
    }

    #[test]
    fn split_nq_scale() {
        let ds = pool(21_000, "nq");
        let (a, b) = split_pool(&ds, 1000.0 / 21000.0, 1).unwrap();
        assert_eq!((a.len(), b.len()), (20_000, 1000));
        check_disjoint(&a, &b).unwrap();
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(matches!(split_pool(&pool(3, "t"), 1.0, 0), Err(CorpusError::InvalidFraction(_))));
        assert!(matches!(
            split_pool(&Dataset::new(vec![], Split::Pool).unwrap(), 0.5, 0),
            Err(CorpusError::EmptyDataset)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn injection_preserves_ids_and_inputs(n in 1usize..120, step in 0usize..=20, seed in any::<u64>()) {
            let rate = step as f64 * 0.05;
            let p = pool(n, "nq");
            let d = pool(7, "webq");
            let out = inject_irrelevant_noise(&p, &d, &NoiseSpec::irrelevant(rate, seed)).unwrap();
            prop_assert_eq!(out.ground_truth().unwrap().noisy_count(), noise_count(rate, n));
            let expected = (rate * n as f64 + 0.5).floor() as usize;
            prop_assert!(out.ground_truth().unwrap().noisy_count().abs_diff(expected) <= 1);
            for (a, b) in p.examples().iter().zip(out.examples()) {
                prop_assert_eq!(&a.id, &b.id);
                prop_assert_eq!(&a.task, &b.task);
                prop_assert_eq!(&a.input_text, &b.input_text);
            }
        }
    }
}
