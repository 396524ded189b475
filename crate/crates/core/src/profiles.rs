//! Model performance profiles and experiment catalogs.
//!
//! Profiles stand in for compiled models: they carry every number the worker
//! emulates and the controller seeds its estimators with. They are loaded
//! from a line-oriented text format:
//!
//! ```text
//! # comment
//! page_bytes 16777216            # optional, defaults to 16 MiB
//! include other.profiles         # path relative to this file
//!
//! model resnet50                 # starts a profile record
//! weights_bytes 102300000
//! weights_transfer_ns 8330000
//! io_bytes 602000 4000           # optional input/output bytes per request
//! io_ns 50000 50000              # optional input/output transfer per request
//! batch 1 2610000                # one line per supported batch size
//! batch 2 3780000
//!
//! replicas resnet50 15           # 15 catalog instances of resnet50
//! ```
//!
//! Instances (dense model ids from 0) come from `replicas` directives in
//! file order. A file without any `replicas` directive yields one instance
//! per profile.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::time::Nanos;

pub type ModelId = u32;

pub const DEFAULT_PAGE_BYTES: u64 = 16 * 1024 * 1024;
pub const DEFAULT_IO_TRANSFER: Nanos = Nanos::from_micros(50);

/// Profiles measured for a representative model set; see `profiles/table1.profiles`.
pub const TABLE1_PROFILES: &str = include_str!("../../../profiles/table1.profiles");

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("model `{model}`: {reason}")]
    Invalid { model: String, reason: String },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("model `{model}` has no batch size {batch}")]
    UnsupportedBatch { model: String, batch: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelProfile {
    pub name: String,
    pub weights_size: u64,
    pub weights_transfer: Nanos,
    /// Strictly increasing.
    pub batch_sizes: Vec<u32>,
    /// `exec_durations[i]` is the execution time of `batch_sizes[i]`.
    pub exec_durations: Vec<Nanos>,
    pub input_size: u64,
    pub output_size: u64,
    pub input_transfer: Nanos,
    pub output_transfer: Nanos,
}

/// Number of cache pages a model's weights occupy. Always derived from the
/// profile, never cached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PagedWeights {
    pub pages_needed: u32,
}

impl PagedWeights {
    pub fn new(weights_size: u64, page_size: u64) -> Self {
        let pages = weights_size.div_ceil(page_size).max(1);
        PagedWeights {
            pages_needed: pages as u32,
        }
    }
}

impl ModelProfile {
    pub fn batch_index(&self, batch: u32) -> Option<usize> {
        self.batch_sizes.binary_search(&batch).ok()
    }

    pub fn exec_duration(&self, batch: u32) -> Option<Nanos> {
        self.batch_index(batch).map(|i| self.exec_durations[i])
    }

    pub fn max_batch(&self) -> u32 {
        *self.batch_sizes.last().expect("validated profile has batch sizes")
    }

    pub fn paged(&self, page_size: u64) -> PagedWeights {
        PagedWeights::new(self.weights_size, page_size)
    }

    /// Profiled execution time used before any measurement exists.
    pub fn seed_estimate(&self, batch: u32) -> Result<Nanos, ProfileError> {
        self.exec_duration(batch)
            .ok_or_else(|| ProfileError::UnsupportedBatch {
                model: self.name.clone(),
                batch,
            })
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let invalid = |reason: String| ProfileError::Invalid {
            model: self.name.clone(),
            reason,
        };
        if self.weights_size == 0 {
            return Err(invalid("weights_bytes must be positive".into()));
        }
        if !self.weights_transfer.is_positive() {
            return Err(invalid("weights_transfer must be positive".into()));
        }
        if !self.input_transfer.is_positive() || !self.output_transfer.is_positive() {
            return Err(invalid("io transfer durations must be positive".into()));
        }
        if self.batch_sizes.is_empty() {
            return Err(invalid("no batch sizes".into()));
        }
        if self.batch_sizes.len() != self.exec_durations.len() {
            return Err(invalid("exec durations do not match batch sizes".into()));
        }
        if self.batch_sizes[0] == 0 {
            return Err(invalid("batch size 0".into()));
        }
        for (&b, &d) in self.batch_sizes.iter().zip(&self.exec_durations) {
            if !d.is_positive() {
                return Err(invalid(format!("batch {b} has non-positive duration")));
            }
        }
        for i in 1..self.batch_sizes.len() {
            let (b0, b1) = (self.batch_sizes[i - 1], self.batch_sizes[i]);
            let (d0, d1) = (self.exec_durations[i - 1], self.exec_durations[i]);
            if b1 <= b0 {
                return Err(invalid(format!(
                    "batch sizes not strictly increasing ({b0} then {b1})"
                )));
            }
            if d1 < d0 {
                return Err(invalid(format!(
                    "exec duration decreases from batch {b0} ({d0}) to batch {b1} ({d1})"
                )));
            }
            // d1/b1 <= d0/b0, compared exactly.
            if (d1.0 as i128) * (b0 as i128) > (d0.0 as i128) * (b1 as i128) {
                return Err(invalid(format!(
                    "per-request time rises from batch {b0} to batch {b1}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub model_id: ModelId,
    pub profile: Arc<ModelProfile>,
    /// Name of the profile this instance was created from.
    pub replica_of: String,
}

/// The set of model instances served in an experiment. Requests to distinct
/// instances are never batched together, even when they share a profile.
#[derive(Debug, Clone)]
pub struct ModelCatalog {
    page_size: u64,
    profiles: Vec<Arc<ModelProfile>>,
    entries: Vec<CatalogEntry>,
}

impl ModelCatalog {
    /// A catalog with the given profiles and no instances yet.
    pub fn new(page_size: u64, profiles: Vec<ModelProfile>) -> Result<Self, ProfileError> {
        let mut cat = ModelCatalog {
            page_size,
            profiles: Vec::new(),
            entries: Vec::new(),
        };
        for p in profiles {
            cat.add_profile(p)?;
        }
        Ok(cat)
    }

    /// One instance per profile.
    pub fn one_each(page_size: u64, profiles: Vec<ModelProfile>) -> Result<Self, ProfileError> {
        let mut cat = Self::new(page_size, profiles)?;
        let names: Vec<String> = cat.profiles.iter().map(|p| p.name.clone()).collect();
        for n in names {
            cat.push_instances(&n, 1)?;
        }
        Ok(cat)
    }

    pub fn table1() -> Self {
        parse_catalog(TABLE1_PROFILES, None).expect("bundled profiles are valid")
    }

    fn add_profile(&mut self, p: ModelProfile) -> Result<(), ProfileError> {
        p.validate()?;
        if self.profile(&p.name).is_some() {
            return Err(ProfileError::Invalid {
                model: p.name.clone(),
                reason: "defined twice".into(),
            });
        }
        self.profiles.push(Arc::new(p));
        Ok(())
    }

    fn push_instances(&mut self, base: &str, copies: usize) -> Result<(), ProfileError> {
        let profile = self
            .profile(base)
            .cloned()
            .ok_or_else(|| ProfileError::UnknownModel(base.to_string()))?;
        for _ in 0..copies {
            let model_id = self.entries.len() as ModelId;
            self.entries.push(CatalogEntry {
                model_id,
                profile: Arc::clone(&profile),
                replica_of: base.to_string(),
            });
        }
        Ok(())
    }

    /// Returns a catalog extended with `copies` new instances of `base`.
    pub fn replicate_model(&self, base: &str, copies: usize) -> Result<Self, ProfileError> {
        let mut out = self.clone();
        out.push_instances(base, copies)?;
        Ok(out)
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn profiles(&self) -> &[Arc<ModelProfile>] {
        &self.profiles
    }

    pub fn profile(&self, name: &str) -> Option<&Arc<ModelProfile>> {
        self.profiles.iter().find(|p| p.name == name)
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, model: ModelId) -> Option<&ModelProfile> {
        self.entries.get(model as usize).map(|e| e.profile.as_ref())
    }

    pub fn pages_needed(&self, model: ModelId) -> Option<u32> {
        self.get(model).map(|p| p.paged(self.page_size).pages_needed)
    }

    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "page_bytes {}", self.page_size).unwrap();
        for p in &self.profiles {
            writeln!(s).unwrap();
            writeln!(s, "model {}", p.name).unwrap();
            writeln!(s, "weights_bytes {}", p.weights_size).unwrap();
            writeln!(s, "weights_transfer_ns {}", p.weights_transfer.0).unwrap();
            writeln!(s, "io_bytes {} {}", p.input_size, p.output_size).unwrap();
            writeln!(s, "io_ns {} {}", p.input_transfer.0, p.output_transfer.0).unwrap();
            for (b, d) in p.batch_sizes.iter().zip(&p.exec_durations) {
                writeln!(s, "batch {} {}", b, d.0).unwrap();
            }
        }
        if !self.entries.is_empty() {
            writeln!(s).unwrap();
        }
        let mut i = 0;
        while i < self.entries.len() {
            let name = &self.entries[i].replica_of;
            let run = self.entries[i..]
                .iter()
                .take_while(|e| &e.replica_of == name)
                .count();
            writeln!(s, "replicas {name} {run}").unwrap();
            i += run;
        }
        s
    }
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<ModelCatalog, ProfileError> {
    let path = path.as_ref();
    let text = read(path)?;
    parse_catalog(&text, path.parent())
}

pub fn save_catalog(catalog: &ModelCatalog, path: impl AsRef<Path>) -> Result<(), ProfileError> {
    let path = path.as_ref();
    std::fs::write(path, catalog.to_canonical_string()).map_err(|source| ProfileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read(path: &Path) -> Result<String, ProfileError> {
    std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses catalog text. `base_dir` resolves `include` directives; without it
/// includes are rejected.
pub fn parse_catalog(text: &str, base_dir: Option<&Path>) -> Result<ModelCatalog, ProfileError> {
    let mut p = Parser::default();
    p.parse(text, base_dir, 0)?;
    p.finish()
}

#[derive(Default)]
struct Draft {
    name: String,
    line: usize,
    weights_size: Option<u64>,
    weights_transfer: Option<i64>,
    io_bytes: Option<(u64, u64)>,
    io_ns: Option<(i64, i64)>,
    batches: Vec<(u32, i64)>,
}

impl Draft {
    fn build(self) -> Result<ModelProfile, ProfileError> {
        let missing = |what: &str| ProfileError::Parse {
            line: self.line,
            msg: format!("model `{}` missing `{what}`", self.name),
        };
        let weights_size = self.weights_size.ok_or_else(|| missing("weights_bytes"))?;
        let weights_transfer = self
            .weights_transfer
            .ok_or_else(|| missing("weights_transfer_ns"))?;
        if self.batches.is_empty() {
            return Err(missing("batch"));
        }
        let (input_size, output_size) = self.io_bytes.unwrap_or((0, 0));
        let (input_ns, output_ns) = self
            .io_ns
            .unwrap_or((DEFAULT_IO_TRANSFER.0, DEFAULT_IO_TRANSFER.0));
        Ok(ModelProfile {
            name: self.name,
            weights_size,
            weights_transfer: Nanos(weights_transfer),
            batch_sizes: self.batches.iter().map(|b| b.0).collect(),
            exec_durations: self.batches.iter().map(|b| Nanos(b.1)).collect(),
            input_size,
            output_size,
            input_transfer: Nanos(input_ns),
            output_transfer: Nanos(output_ns),
        })
    }
}

#[derive(Default)]
struct Parser {
    page_size: Option<u64>,
    profiles: Vec<ModelProfile>,
    draft: Option<Draft>,
    replicas: Vec<(String, usize, usize)>,
}

const MAX_INCLUDE_DEPTH: usize = 8;

impl Parser {
    fn close_draft(&mut self) -> Result<(), ProfileError> {
        if let Some(d) = self.draft.take() {
            let p = d.build()?;
            p.validate()?;
            if self.profiles.iter().any(|q| q.name == p.name) {
                return Err(ProfileError::Invalid {
                    model: p.name,
                    reason: "defined twice".into(),
                });
            }
            self.profiles.push(p);
        }
        Ok(())
    }

    fn parse(&mut self, text: &str, base: Option<&Path>, depth: usize) -> Result<(), ProfileError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut words = content.split_whitespace();
            let key = words.next().unwrap();
            let args: Vec<&str> = words.collect();
            let err = |msg: String| ProfileError::Parse { line, msg };
            let want = |n: usize| -> Result<(), ProfileError> {
                if args.len() == n {
                    Ok(())
                } else {
                    Err(err(format!("`{key}` takes {n} argument(s), got {}", args.len())))
                }
            };
            let int = |s: &str| -> Result<i64, ProfileError> {
                s.parse::<i64>()
                    .map_err(|_| err(format!("`{s}` is not an integer")))
            };
            let uint = |s: &str| -> Result<u64, ProfileError> {
                s.parse::<u64>()
                    .map_err(|_| err(format!("`{s}` is not a non-negative integer")))
            };
            match key {
                "page_bytes" => {
                    want(1)?;
                    self.close_draft()?;
                    let v = uint(args[0])?;
                    if v == 0 {
                        return Err(err("page_bytes must be positive".into()));
                    }
                    self.page_size = Some(v);
                }
                "include" => {
                    want(1)?;
                    self.close_draft()?;
                    let dir = base.ok_or_else(|| err("include without a base directory".into()))?;
                    if depth >= MAX_INCLUDE_DEPTH {
                        return Err(err("includes nested too deeply".into()));
                    }
                    let path = dir.join(args[0]);
                    let text = read(&path)?;
                    self.parse(&text, path.parent(), depth + 1)?;
                }
                "model" => {
                    want(1)?;
                    self.close_draft()?;
                    self.draft = Some(Draft {
                        name: args[0].to_string(),
                        line,
                        ..Draft::default()
                    });
                }
                "replicas" => {
                    want(2)?;
                    self.close_draft()?;
                    let count = uint(args[1])? as usize;
                    self.replicas.push((args[0].to_string(), count, line));
                }
                "weights_bytes" | "weights_transfer_ns" | "io_bytes" | "io_ns" | "batch" => {
                    let d = self
                        .draft
                        .as_mut()
                        .ok_or_else(|| err(format!("`{key}` outside a model record")))?;
                    match key {
                        "weights_bytes" => {
                            want(1)?;
                            d.weights_size = Some(uint(args[0])?);
                        }
                        "weights_transfer_ns" => {
                            want(1)?;
                            d.weights_transfer = Some(int(args[0])?);
                        }
                        "io_bytes" => {
                            want(2)?;
                            d.io_bytes = Some((uint(args[0])?, uint(args[1])?));
                        }
                        "io_ns" => {
                            want(2)?;
                            d.io_ns = Some((int(args[0])?, int(args[1])?));
                        }
                        _ => {
                            want(2)?;
                            let b = uint(args[0])?;
                            let b = u32::try_from(b).map_err(|_| err("batch size too large".into()))?;
                            d.batches.push((b, int(args[1])?));
                        }
                    }
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<ModelCatalog, ProfileError> {
        self.close_draft()?;
        let page_size = self.page_size.unwrap_or(DEFAULT_PAGE_BYTES);
        let names: Vec<String> = self.profiles.iter().map(|p| p.name.clone()).collect();
        let mut cat = ModelCatalog::new(page_size, self.profiles)?;
        if self.replicas.is_empty() {
            for n in names {
                cat.push_instances(&n, 1)?;
            }
        } else {
            for (name, count, line) in self.replicas {
                cat.push_instances(&name, count).map_err(|e| match e {
                    ProfileError::UnknownModel(m) => ProfileError::Parse {
                        line,
                        msg: format!("replicas of unknown model `{m}`"),
                    },
                    e => e,
                })?;
            }
        }
        Ok(cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resnet50() -> ModelProfile {
        ModelCatalog::table1().profile("resnet50").unwrap().as_ref().clone()
    }

    #[test]
    fn table1_resnet50_accepted() {
        let p = resnet50();
        assert_eq!(p.weights_size, 102_300_000);
        assert_eq!(p.weights_transfer, Nanos::from_millis_f64(8.33));
        let ms: Vec<f64> = p.exec_durations.iter().map(|d| d.as_millis_f64()).collect();
        assert_eq!(ms, vec![2.61, 3.78, 5.61, 9.13, 15.67]);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn seed_estimates() {
        let cat = ModelCatalog::table1();
        let r50 = cat.profile("resnet50").unwrap();
        assert_eq!(r50.seed_estimate(1).unwrap(), Nanos::from_millis_f64(2.61));
        assert_eq!(r50.seed_estimate(16).unwrap(), Nanos::from_millis_f64(15.67));
        let dn = cat.profile("densenet169").unwrap();
        assert_eq!(dn.seed_estimate(4).unwrap(), Nanos::from_millis_f64(8.57));
        assert!(matches!(
            r50.seed_estimate(3),
            Err(ProfileError::UnsupportedBatch { batch: 3, .. })
        ));
    }

    #[test]
    fn pages_by_ceiling() {
        let cat = ModelCatalog::table1();
        let page = cat.page_size();
        // 46.7MB / 16MiB = 2.78 -> 3; 102.3MB -> 6.10 -> 7.
        assert_eq!(cat.profile("resnet18").unwrap().paged(page).pages_needed, 3);
        assert_eq!(cat.profile("resnet50").unwrap().paged(page).pages_needed, 7);
        assert_eq!(PagedWeights::new(1, page).pages_needed, 1);
        assert_eq!(PagedWeights::new(page, page).pages_needed, 1);
        assert_eq!(PagedWeights::new(page + 1, page).pages_needed, 2);
    }

    #[test]
    fn decreasing_exec_rejected() {
        let mut p = resnet50();
        p.exec_durations[1] = Nanos::from_millis_f64(2.0);
        let err = p.validate().unwrap_err().to_string();
        assert!(err.contains("resnet50") && err.contains("decreases"), "{err}");
    }

    #[test]
    fn mobile_pose_row_violates_efficiency() {
        let text = "model mobile_pose_mobilenetv3\nweights_bytes 19000000\nweights_transfer_ns 1550000\n\
                    batch 1 1290000\nbatch 2 1920000\nbatch 4 3130000\nbatch 8 5710000\nbatch 16 11620000\n";
        let err = parse_catalog(text, None).unwrap_err().to_string();
        assert!(err.contains("mobile_pose_mobilenetv3"), "{err}");
        assert!(err.contains("per-request"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line() {
        let err = parse_catalog("model a\nweights_bytes x\n", None).unwrap_err();
        assert!(matches!(err, ProfileError::Parse { line: 2, .. }), "{err}");
        let err = parse_catalog("batch 1 5\n", None).unwrap_err();
        assert!(matches!(err, ProfileError::Parse { line: 1, .. }));
        let err = parse_catalog("replicas ghost 2\n", None).unwrap_err();
        assert!(err.to_string().contains("ghost"));
        let err = parse_catalog("frobnicate 1\n", None).unwrap_err();
        assert!(err.to_string().contains("frobnicate"));
    }

    #[test]
    fn io_defaults() {
        let cat = parse_catalog(
            "model m\nweights_bytes 10\nweights_transfer_ns 5\nbatch 1 100\n",
            None,
        )
        .unwrap();
        let p = cat.get(0).unwrap();
        assert_eq!(p.input_transfer, DEFAULT_IO_TRANSFER);
        assert_eq!(p.output_transfer, DEFAULT_IO_TRANSFER);
        assert_eq!(cat.page_size(), DEFAULT_PAGE_BYTES);
    }

    #[test]
    fn replicate() {
        let cat = ModelCatalog::new(DEFAULT_PAGE_BYTES, vec![resnet50()]).unwrap();
        let out = cat.replicate_model("resnet50", 15).unwrap();
        assert_eq!(out.len(), 15);
        let ids: Vec<ModelId> = out.entries().iter().map(|e| e.model_id).collect();
        assert_eq!(ids, (0..15).collect::<Vec<_>>());
        assert!(out.entries().iter().all(|e| e.replica_of == "resnet50"));

        let same = out.replicate_model("resnet50", 0).unwrap();
        assert_eq!(same.len(), 15);
        assert!(matches!(
            out.replicate_model("vgg", 1),
            Err(ProfileError::UnknownModel(_))
        ));
    }

    #[test]
    fn sixty_one_bases_times_66() {
        let base = resnet50();
        let profiles: Vec<ModelProfile> = (0..61)
            .map(|i| ModelProfile {
                name: format!("m{i}"),
                ..base.clone()
            })
            .collect();
        let mut cat = ModelCatalog::new(DEFAULT_PAGE_BYTES, profiles).unwrap();
        for i in 0..61 {
            cat = cat.replicate_model(&format!("m{i}"), 66).unwrap();
        }
        assert_eq!(cat.len(), 4026);
        assert_eq!(cat.entries().last().unwrap().model_id, 4025);
    }

    #[test]
    fn canonical_round_trip() {
        let cat = ModelCatalog::table1().replicate_model("resnet50", 3).unwrap();
        let text = cat.to_canonical_string();
        let again = parse_catalog(&text, None).unwrap();
        assert_eq!(again.to_canonical_string(), text);
        assert_eq!(again.len(), cat.len());
    }

    #[test]
    fn include_and_replicas() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.profiles"), TABLE1_PROFILES).unwrap();
        std::fs::write(
            dir.path().join("exp.catalog"),
            "include base.profiles\nreplicas resnet50 15\nreplicas resnet18 2\n",
        )
        .unwrap();
        let cat = load_catalog(dir.path().join("exp.catalog")).unwrap();
        assert_eq!(cat.len(), 17);
        assert_eq!(cat.entries()[15].replica_of, "resnet18");

        let out = dir.path().join("saved.catalog");
        save_catalog(&cat, &out).unwrap();
        let reloaded = load_catalog(&out).unwrap();
        assert_eq!(reloaded.to_canonical_string(), cat.to_canonical_string());
    }
}
