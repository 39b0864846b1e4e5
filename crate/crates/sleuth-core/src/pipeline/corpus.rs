//! Synthetic evaluation corpora.
//!
//! Malicious samples hide a behavior payload behind an input trigger: a
//! chain of byte-equality guards that jump to a benign exit on the first
//! mismatch. The payload cycles through the four builtin behaviors. The
//! benign exit can carry a configurable decoy region, a diamond chain of
//! input-dependent branches with no interesting system calls, which blows
//! up the uninteresting side of the path space so that search strategies
//! can be told apart. Benign samples share the same shell with an
//! innocuous payload.
//!
//! Variants of a malicious sample keep its trigger and behavior but rename
//! registers, reorder independent setup, perturb syscall arguments, and
//! sprinkle junk arithmetic; signature synthesis should fold them into one
//! family.
//!
//! Every generated sample is verified before it is written: the trigger
//! input must replay to a trace matching the intended spec (and the zero
//! input must not), and benign samples must classify clean on every
//! feasible path.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::concolic::{enumerate_all, ExploreConfig};
use crate::features::{extract, FeatureVector};
use crate::ltl::{builtin_specs, classify_trace};
use crate::par;
use crate::solver::Budget;
use crate::vm::asm::{parse_program, pretty_print};
use crate::vm::{run_concrete, Program, VmConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub name: String,
    pub seed: u64,
    /// Number of malicious base samples; behaviors rotate.
    pub malicious: usize,
    /// Number of benign samples.
    pub benign: usize,
    /// Guard bytes per trigger, 1 or 2.
    pub trigger_bytes: usize,
    /// Decoy diamond levels on the guard-miss side.
    pub decoy_levels: usize,
    /// Total variants per malicious base sample, itself included.
    pub variants: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            name: "corpus".into(),
            seed: 42,
            malicious: 4,
            benign: 4,
            trigger_bytes: 2,
            decoy_levels: 0,
            variants: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Malicious,
    Benign,
}

/// The four generated behaviors, named after the spec each must trip.
pub const BEHAVIORS: [&str; 4] = ["exfil", "privesc", "persist", "poly"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub file: String,
    pub name: String,
    pub label: Label,
    /// Spec the sample is built to match; `None` for benign.
    pub behavior: Option<String>,
    /// Input bytes that unlock the payload; `None` for benign.
    pub trigger: Option<Vec<u8>>,
    /// Base sample name when this is a variant.
    pub base: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CorpusSpec,
    pub samples: Vec<SampleMeta>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("spec: {0}")]
    BadSpec(String),
    #[error("sample {name} failed self-verification: {detail}")]
    Verify { name: String, detail: String },
    #[error("sample {file}: {detail}")]
    BadSample { file: String, detail: String },
}

pub fn load_spec(path: &Path) -> Result<CorpusSpec, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    Ok(toml::from_str(&text)?)
}

/// Eight scratch registers get dealt out per sample so variants differ in
/// allocation: [guard input, guard constant, payload a, payload b, decoy
/// input, decoy constant, junk a, junk b].
#[derive(Debug, Clone, Copy)]
struct RegMap {
    gin: u8,
    gc: u8,
    pa: u8,
    pb: u8,
    din: u8,
    dc: u8,
    ja: u8,
    jb: u8,
}

impl RegMap {
    fn deal(rng: &mut ChaCha8Rng) -> RegMap {
        let mut regs: Vec<u8> = (0..8).collect();
        regs.shuffle(rng);
        RegMap {
            gin: regs[0],
            gc: regs[1],
            pa: regs[2],
            pb: regs[3],
            din: regs[4],
            dc: regs[5],
            ja: regs[6],
            jb: regs[7],
        }
    }
}

struct SampleBuilder {
    lines: Vec<String>,
    rng: ChaCha8Rng,
    junk_rate: f64,
    map: RegMap,
}

impl SampleBuilder {
    fn new(name: &str, seed: u64, map: RegMap, junk_rate: f64) -> SampleBuilder {
        let mut b = SampleBuilder {
            lines: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            junk_rate,
            map,
        };
        b.lines.push(format!(".name {name}"));
        b.lines.push(format!(".seed {seed}"));
        b.lines.push("entry:".into());
        b
    }

    fn push(&mut self, line: impl Into<String>) {
        self.lines.push(format!("    {}", line.into()));
    }

    fn label(&mut self, name: &str) {
        self.lines.push(format!("{name}:"));
    }

    /// Junk that touches only the junk registers, inserted between real
    /// instructions with probability `junk_rate`.
    fn maybe_junk(&mut self) {
        if self.rng.gen::<f64>() < self.junk_rate {
            let RegMap { ja, jb, .. } = self.map;
            let c: u8 = self.rng.gen();
            match self.rng.gen_range(0..3u8) {
                0 => self.push(format!("CONST r{ja}, {c}")),
                1 => self.push(format!("XOR r{ja}, r{ja}, r{jb}")),
                _ => self.push(format!("ADD r{jb}, r{jb}, r{ja}")),
            }
        }
    }

    fn guards(&mut self, trigger: &[u8], miss: &str) {
        let RegMap { gin, gc, .. } = self.map;
        for &v in trigger {
            self.maybe_junk();
            self.push(format!("INPUT r{gin}"));
            self.push(format!("CONST r{gc}, {v}"));
            self.push(format!("BR NE r{gin}, r{gc}, {miss}"));
        }
    }

    fn payload(&mut self, behavior: &str) {
        let RegMap { pa, pb, .. } = self.map;
        match behavior {
            "exfil" => {
                self.push("READ_FILE SENSITIVE_DOC");
                self.maybe_junk();
                let socket = self.rng.gen_range(1..=9u32);
                self.push(format!("SEND {socket}"));
            }
            "privesc" => {
                self.push(format!("GETUID r{pa}"));
                self.maybe_junk();
                self.push("SETUID 0");
                let socket = self.rng.gen_range(1..=9u32);
                self.push(format!("SEND {socket}"));
            }
            "persist" => {
                let target = if self.rng.gen() { "CRON" } else { "SYSTEMD" };
                self.push(format!("WRITE_FILE {target}"));
            }
            "poly" => {
                self.push("MPROTECT TEXT, RWX");
                self.maybe_junk();
                let addr = self.rng.gen_range(0x100..0xf00u32);
                self.push(format!("CONST r{pa}, {addr:#x}"));
                self.push(format!("CONST r{pb}, 0x41"));
                self.push(format!("STORE [r{pa}], r{pb}"));
            }
            other => panic!("unknown behavior {other}"),
        }
        self.push("HALT");
    }

    fn quiet_payload(&mut self) {
        let RegMap { pa, pb, .. } = self.map;
        self.push(format!("GETUID r{pa}"));
        self.maybe_junk();
        self.push(format!("CONST r{pb}, 3"));
        self.push(format!("ADD r{pa}, r{pa}, r{pb}"));
        self.push("HALT");
    }

    /// Diamond chain: each level branches on a fresh input byte; both
    /// sides are pure arithmetic and rejoin before the next level.
    fn decoys(&mut self, levels: usize) {
        let RegMap { din, dc, ja, .. } = self.map;
        for level in 0..levels {
            let v: u8 = self.rng.gen_range(1..=255);
            self.push(format!("INPUT r{din}"));
            self.push(format!("CONST r{dc}, {v}"));
            self.push(format!("BR NE r{din}, r{dc}, d{level}"));
            self.push(format!("ADD r{ja}, r{ja}, r{dc}"));
            self.label(&format!("d{level}"));
            self.push(format!("XOR r{ja}, r{ja}, r{din}"));
        }
    }

    fn build(self) -> Result<Program, CorpusError> {
        let text = self.lines.join("\n") + "\n";
        parse_program(&text)
            .map_err(|e| CorpusError::BadSample { file: "<generated>".into(), detail: e.to_string() })
    }
}

fn malicious_program(
    name: &str,
    seed: u64,
    behavior: &str,
    trigger: &[u8],
    decoy_levels: usize,
    junk_rate: f64,
    map: RegMap,
) -> Result<Program, CorpusError> {
    let mut b = SampleBuilder::new(name, seed, map, junk_rate);
    b.guards(trigger, "miss");
    b.payload(behavior);
    b.label("miss");
    b.decoys(decoy_levels);
    let pa = b.map.pa;
    b.push(format!("GETUID r{pa}"));
    b.push("HALT");
    b.build()
}

fn benign_program(
    name: &str,
    seed: u64,
    gate: &[u8],
    decoy_levels: usize,
    junk_rate: f64,
    map: RegMap,
) -> Result<Program, CorpusError> {
    let mut b = SampleBuilder::new(name, seed, map, junk_rate);
    b.guards(gate, "miss");
    b.quiet_payload();
    b.label("miss");
    b.decoys(decoy_levels);
    b.push("HALT");
    b.build()
}

fn verify_malicious(
    program: &Program,
    behavior: &str,
    trigger: &[u8],
    name: &str,
) -> Result<(), CorpusError> {
    let specs = builtin_specs();
    let vm = VmConfig::default();
    let hot = run_concrete(program, trigger, 4096, &vm);
    let matched = classify_trace(&hot, &specs);
    if !matched.iter().any(|m| m == behavior) {
        return Err(CorpusError::Verify {
            name: name.into(),
            detail: format!("trigger replay matched {matched:?}, wanted {behavior}"),
        });
    }
    let cold = run_concrete(program, &[], 4096, &vm);
    let cold_matched = classify_trace(&cold, &specs);
    if !cold_matched.is_empty() {
        return Err(CorpusError::Verify {
            name: name.into(),
            detail: format!("zero input already matches {cold_matched:?}"),
        });
    }
    Ok(())
}

fn verify_benign(program: &Program, name: &str) -> Result<(), CorpusError> {
    let specs = builtin_specs();
    let runs = enumerate_all(
        program,
        &ExploreConfig::default(),
        &VmConfig::default(),
        &Budget::nodes(500_000),
    );
    for run in &runs {
        let matched = classify_trace(&run.trace, &specs);
        if !matched.is_empty() {
            return Err(CorpusError::Verify {
                name: name.into(),
                detail: format!(
                    "path {} matches {matched:?}",
                    run.constraint
                ),
            });
        }
    }
    Ok(())
}

/// Generates all samples in memory. Deterministic in the spec.
pub fn generate_samples(spec: &CorpusSpec) -> Result<Vec<(SampleMeta, Program)>, CorpusError> {
    if !(1..=4).contains(&spec.trigger_bytes) {
        return Err(CorpusError::BadSpec("trigger_bytes must be in 1..=4".into()));
    }
    if spec.variants == 0 {
        return Err(CorpusError::BadSpec("variants must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for i in 0..spec.malicious {
        let behavior = BEHAVIORS[i % BEHAVIORS.len()];
        let base_name = format!("mal-{i:03}-{behavior}");
        // Nonzero bytes keep the all-zero run on the miss side.
        let trigger: Vec<u8> =
            (0..spec.trigger_bytes).map(|_| rng.gen_range(1..=255)).collect();
        for v in 0..spec.variants {
            let name =
                if v == 0 { base_name.clone() } else { format!("{base_name}-v{v}") };
            let seed = rng.gen();
            let map = RegMap::deal(&mut rng);
            let junk_rate = if v == 0 { 0.0 } else { 0.35 };
            let program = malicious_program(
                &name,
                seed,
                behavior,
                &trigger,
                spec.decoy_levels,
                junk_rate,
                map,
            )?;
            verify_malicious(&program, behavior, &trigger, &name)?;
            out.push((
                SampleMeta {
                    file: format!("samples/{name}.asm"),
                    name: name.clone(),
                    label: Label::Malicious,
                    behavior: Some(behavior.into()),
                    trigger: Some(trigger.clone()),
                    base: (v > 0).then(|| base_name.clone()),
                },
                program,
            ));
        }
    }
    for i in 0..spec.benign {
        let name = format!("ben-{i:03}");
        let gate: Vec<u8> = (0..spec.trigger_bytes).map(|_| rng.gen_range(1..=255)).collect();
        let seed = rng.gen();
        let map = RegMap::deal(&mut rng);
        let program = benign_program(&name, seed, &gate, spec.decoy_levels, 0.2, map)?;
        verify_benign(&program, &name)?;
        out.push((
            SampleMeta {
                file: format!("samples/{name}.asm"),
                name,
                label: Label::Benign,
                behavior: None,
                trigger: None,
                base: None,
            },
            program,
        ));
    }
    Ok(out)
}

/// Fresh polymorphic rewrites of a malicious sample: same behavior and
/// trigger, new register dealing and junk schedule. Each variant passes the
/// same self-verification as generated corpus samples. Used to test whether
/// a synthesized family signature catches variants it was not built from.
pub fn polymorphic_variants(
    meta: &SampleMeta,
    decoy_levels: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Program>, CorpusError> {
    let missing = |what: &str| CorpusError::BadSample {
        file: meta.file.clone(),
        detail: format!("not a malicious sample: no {what}"),
    };
    let behavior = meta.behavior.clone().ok_or_else(|| missing("behavior"))?;
    let trigger = meta.trigger.clone().ok_or_else(|| missing("trigger"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for v in 0..count {
        let name = format!("{}-p{v}", meta.name);
        let program = malicious_program(
            &name,
            rng.gen(),
            &behavior,
            &trigger,
            decoy_levels,
            0.35,
            RegMap::deal(&mut rng),
        )?;
        verify_malicious(&program, &behavior, &trigger, &name)?;
        out.push(program);
    }
    Ok(out)
}

/// Generates and writes `manifest.json` plus `samples/*.asm` under `dir`.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Manifest, CorpusError> {
    let samples = generate_samples(spec)?;
    std::fs::create_dir_all(dir.join("samples"))?;
    for (meta, program) in &samples {
        std::fs::write(dir.join(&meta.file), pretty_print(program))?;
    }
    let manifest = Manifest {
        spec: spec.clone(),
        samples: samples.into_iter().map(|(meta, _)| meta).collect(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Loads a corpus directory back into memory.
pub fn read_corpus(dir: &Path) -> Result<Vec<(SampleMeta, Program)>, CorpusError> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut out = Vec::with_capacity(manifest.samples.len());
    for meta in manifest.samples {
        let text = std::fs::read_to_string(dir.join(&meta.file))?;
        let program = parse_program(&text)
            .map_err(|e| CorpusError::BadSample { file: meta.file.clone(), detail: e.to_string() })?;
        out.push((meta, program));
    }
    Ok(out)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Enumerates every feasible path of `program` and labels its features by
/// whether the trace matches a behavior spec. Path-level ground truth:
/// the guarded-off paths of a malicious sample count as benign examples.
pub fn labeled_paths(program: &Program) -> Vec<(FeatureVector, bool)> {
    let specs = builtin_specs();
    let runs = enumerate_all(
        program,
        &ExploreConfig::default(),
        &VmConfig::default(),
        &Budget::nodes(500_000),
    );
    runs.iter()
        .map(|run| {
            let features = extract(&run.constraint, &run.trace, program);
            let label = !classify_trace(&run.trace, &specs).is_empty();
            (features, label)
        })
        .collect()
}

/// Classifier training data for a whole corpus; samples fan out in
/// parallel.
pub fn labeled_dataset(samples: &[(SampleMeta, Program)]) -> Vec<(FeatureVector, bool)> {
    par::map(samples, |(_, program)| labeled_paths(program)).into_iter().flatten().collect()
}
