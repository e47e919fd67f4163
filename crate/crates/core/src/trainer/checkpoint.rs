//! Binary checkpoint files.
//!
//! Layout: `CSASR`, one version byte, then two blocks. Each block is a
//! little-endian `u32` byte length, a UTF-8 header of that length, and the
//! raw little-endian `f32` payload of every tensor the header lists, in
//! header order. The first block holds run state and parameters, the
//! second the optimizer moments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use super::OptimState;
use crate::config::RunConfig;
use crate::network::ModelConfig;
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CSASR";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: PathBuf },

    #[error("{path}: checkpoint format version {found}, this build reads version {expected}")]
    VersionMismatch { path: PathBuf, found: u8, expected: u8 },

    #[error("{path}: checkpoint is truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: malformed checkpoint header: {detail}")]
    Header { path: PathBuf, detail: String },

    #[error("parameter shapes differ from the model configuration\n  expected: {}\n  found:    {}", .expected.join(", "), .found.join(", "))]
    ShapeMismatch { expected: Vec<String>, found: Vec<String> },
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams<f32>,
    pub optim: OptimState<f32>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed iterations.
    pub step: u64,
    pub best_psnr: f64,
    pub rng: RngState,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn describe<'a>(items: impl Iterator<Item = (&'a String, Vec<usize>)>) -> Vec<String> {
    items.map(|(n, s)| format!("{n}[{}]", shape_text(&s))).collect()
}

fn push_block(out: &mut Vec<u8>, header: &str, tensors: &[&[f32]]) {
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in tensors {
        for v in *t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{what} needs {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn header(&mut self) -> Result<&'a str, CheckpointError> {
        let len = u32::from_le_bytes(self.take(4, "header length")?.try_into().unwrap()) as usize;
        let raw = self.take(len, "header")?;
        std::str::from_utf8(raw).map_err(|e| self.bad(format!("header is not UTF-8: {e}")))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n * 4, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn bad(&self, detail: String) -> CheckpointError {
        CheckpointError::Header { path: self.path.to_path_buf(), detail }
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|d| d.parse().ok()).collect()
}

/// `<tag> <name> f32 <shape>` lines.
fn tensor_line(line: &str, tag: &str) -> Option<(String, Vec<usize>)> {
    let mut it = line.split(' ');
    if it.next()? != tag {
        return None;
    }
    let name = it.next()?.to_string();
    if it.next()? != "f32" {
        return None;
    }
    let shape = parse_shape(it.next()?)?;
    it.next().is_none().then_some((name, shape))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);

        let rng_seed: String = self.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        let mut header = format!(
            "epoch {}\nstep {}\nbest_psnr {:?}\nrng {} {} {}\n",
            self.epoch, self.step, self.best_psnr, rng_seed, self.rng.stream, self.rng.word_pos
        );
        for line in self.config.to_text().lines() {
            header.push_str(&format!("config {line}\n"));
        }
        let mut data = Vec::new();
        for (name, t) in self.params.iter() {
            header.push_str(&format!("param {name} f32 {}\n", shape_text(t.shape())));
            data.push(t.data());
        }
        push_block(&mut out, &header, &data);

        let mut header = format!("adam_t {}\n", self.optim.t);
        let mut data = Vec::new();
        for (tag, moments) in [("m", &self.optim.m), ("v", &self.optim.v)] {
            for (name, t) in self.params.iter() {
                let values = &moments[name];
                header.push_str(&format!("{tag} {name} f32 {}\n", shape_text(t.shape())));
                data.push(values.as_slice());
            }
        }
        push_block(&mut out, &header, &data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0, path };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic { path: path.to_path_buf() });
        }
        r.pos = MAGIC.len();
        let version = r.take(1, "version byte")?[0];
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }

        let header = r.header()?;
        let (mut epoch, mut step, mut best_psnr, mut rng) = (None, None, None, None);
        let mut config_lines = String::new();
        let mut listed = Vec::new();
        for line in header.lines() {
            let (tag, rest) = line.split_once(' ').ok_or_else(|| r.bad(format!("bad line `{line}`")))?;
            match tag {
                "epoch" => epoch = rest.parse().ok(),
                "step" => step = rest.parse().ok(),
                "best_psnr" => best_psnr = rest.parse().ok(),
                "rng" => rng = parse_rng(rest),
                "config" => {
                    config_lines.push_str(rest);
                    config_lines.push('\n');
                }
                "param" => listed.push(tensor_line(line, "param").ok_or_else(|| r.bad(format!("bad line `{line}`")))?),
                _ => return Err(r.bad(format!("unknown entry `{tag}`"))),
            }
        }
        let missing = |what: &str| CheckpointError::Header { path: path.to_path_buf(), detail: format!("missing or invalid `{what}`") };
        let epoch = epoch.ok_or_else(|| missing("epoch"))?;
        let step = step.ok_or_else(|| missing("step"))?;
        let best_psnr = best_psnr.ok_or_else(|| missing("best_psnr"))?;
        let rng = rng.ok_or_else(|| missing("rng"))?;
        let config = RunConfig::from_text(&config_lines).map_err(|e| r.bad(format!("config: {e}")))?;

        let expected: Vec<(String, Vec<usize>)> =
            config.model.param_specs().into_iter().map(|s| (s.name, s.shape)).collect();
        let mut expected_sorted = expected.clone();
        expected_sorted.sort();
        if expected_sorted != listed {
            return Err(CheckpointError::ShapeMismatch {
                expected: describe(expected_sorted.iter().map(|(n, s)| (n, s.clone()))),
                found: describe(listed.iter().map(|(n, s)| (n, s.clone()))),
            });
        }

        let mut tensors = BTreeMap::new();
        for (name, shape) in &listed {
            let n = shape.iter().product();
            let data = r.floats(n, name)?;
            let t = Tensor::new(shape.clone(), data).map_err(|e| r.bad(e.to_string()))?;
            tensors.insert(name.clone(), t);
        }
        let params = ModelParams::from_map(tensors);

        let header = r.header()?;
        let mut lines = header.lines();
        let t = lines
            .next()
            .and_then(|l| l.strip_prefix("adam_t "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| missing("adam_t"))?;
        let mut optim = OptimState { t, m: BTreeMap::new(), v: BTreeMap::new() };
        let mut order = Vec::new();
        for line in lines {
            let entry = tensor_line(line, "m")
                .map(|e| ("m", e))
                .or_else(|| tensor_line(line, "v").map(|e| ("v", e)))
                .ok_or_else(|| r.bad(format!("bad optimizer line `{line}`")))?;
            order.push(entry);
        }
        for (tag, (name, shape)) in order {
            if params.get(&name).map(|p| p.shape() != shape.as_slice()).unwrap_or(true) {
                return Err(r.bad(format!("optimizer moment `{name}` does not match a parameter")));
            }
            let data = r.floats(shape.iter().product(), &name)?;
            if tag == "m" {
                optim.m.insert(name, data);
            } else {
                optim.v.insert(name, data);
            }
        }
        if optim.m.len() != params.len() || optim.v.len() != params.len() {
            return Err(r.bad("optimizer moments do not cover every parameter".into()));
        }
        if r.pos != bytes.len() {
            return Err(r.bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, params, optim, epoch, step, best_psnr, rng })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes, path)
    }

    /// Refuses a model configuration whose parameters differ from ours.
    pub fn check_model(&self, model: &ModelConfig) -> Result<(), CheckpointError> {
        let mut expected: Vec<(String, Vec<usize>)> =
            model.param_specs().into_iter().map(|s| (s.name, s.shape)).collect();
        expected.sort();
        let found: Vec<(String, Vec<usize>)> =
            self.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if expected != found {
            return Err(CheckpointError::ShapeMismatch {
                expected: describe(expected.iter().map(|(n, s)| (n, s.clone()))),
                found: describe(found.iter().map(|(n, s)| (n, s.clone()))),
            });
        }
        Ok(())
    }
}

fn parse_rng(s: &str) -> Option<RngState> {
    let mut it = s.split(' ');
    let hex = it.next()?;
    if hex.len() != 64 {
        return None;
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).ok()?;
    }
    let stream = it.next()?.parse().ok()?;
    let word_pos = it.next()?.parse().ok()?;
    Some(RngState { seed, stream, word_pos })
}
