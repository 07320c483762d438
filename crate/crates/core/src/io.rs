//! Persistent formats: NVID videos, CSV grids, the NDMD checkpoint container,
//! loss-history CSVs, decomposition records and provenance sidecars.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::NeuralRepModel;
use crate::decomposition::{ModalDecomposition, ModeLayout, TimeAxis};
use crate::error::{Error, Result};
use crate::field_net::{Activation, NetworkParams, NetworkSpec, PosEncConfig};
use crate::neuraldmd::{CoefficientSource, InitialStateParams, NeuralModalModel, SpectrumParams};
use crate::training::{HistoryRow, TrainState};
use crate::video::{Grid, VideoGrid};

pub const NVID_MAGIC: &[u8; 4] = b"NVID";
pub const NVID_VERSION: u32 = 1;
const NVID_HEADER: usize = 4 + 4 + 12 + 16;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NDMD";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::file(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

/// Little-endian cursor that reports the byte offset of any failure.
struct Reader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(what: &'static str, bytes: &'a [u8]) -> Self {
        Self { what, bytes, pos: 0 }
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            what: self.what,
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(self.err(0, format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(want).unwrap_or(""))));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// NVID bytes: magic, version, `T, H, W`, `t0`, `dt`, then `T·H·W` f32 values.
pub fn encode_nvid(video: &VideoGrid) -> Vec<u8> {
    let n = video.num_frames() * video.grid.len();
    let mut out = Vec::with_capacity(NVID_HEADER + 4 * n);
    out.extend_from_slice(NVID_MAGIC);
    out.extend_from_slice(&NVID_VERSION.to_le_bytes());
    for d in [video.num_frames(), video.grid.height, video.grid.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&video.t0.to_le_bytes());
    out.extend_from_slice(&video.dt.to_le_bytes());
    for f in &video.frames {
        for &v in f {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_nvid(bytes: &[u8]) -> Result<VideoGrid> {
    let mut r = Reader::new("NVID", bytes);
    r.magic(NVID_MAGIC)?;
    let version = r.u32()?;
    if version != NVID_VERSION {
        return Err(Error::Version {
            what: "NVID",
            found: version,
            expected: NVID_VERSION,
        });
    }
    let dims_at = r.pos;
    let (t, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if t == 0 || h == 0 || w == 0 {
        return Err(r.err(dims_at, format!("empty video dimensions {t}×{h}×{w}")));
    }
    let t0_at = r.pos;
    let t0 = r.f64()?;
    let dt = r.f64()?;
    if !t0.is_finite() || !(dt > 0.0) || !dt.is_finite() {
        return Err(r.err(t0_at, format!("invalid time base t0={t0}, dt={dt}")));
    }
    let n = h.checked_mul(w).and_then(|hw| hw.checked_mul(t)).ok_or_else(|| r.err(dims_at, "dimensions overflow"))?;
    if bytes.len() - r.pos < 4 * n {
        return Err(r.err(bytes.len(), format!("truncated: {n} values need {} bytes of payload", 4 * n)));
    }
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let mut f = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            let at = r.pos;
            let v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(r.err(at, "non-finite value"));
            }
            f.push(v as f64);
        }
        frames.push(f);
    }
    r.finish()?;
    VideoGrid::new(Grid::new(h, w)?, t0, dt, frames)
}

pub fn nvid_write(path: impl AsRef<Path>, video: &VideoGrid) -> Result<()> {
    write_file(path.as_ref(), &encode_nvid(video))
}

pub fn nvid_read(path: impl AsRef<Path>) -> Result<VideoGrid> {
    decode_nvid(&read_file(path.as_ref())?)
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

/// One frame from CSV text: `H` rows of `W` numbers.
pub fn parse_csv_grid(text: &str, label: &str) -> Result<(Grid, Vec<f64>)> {
    let table = |row: usize, column: usize, message: String| Error::Table {
        file: label.to_string(),
        row,
        column,
        message,
    };
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, rec) in csv_reader(text).records().enumerate() {
        let rec = rec.map_err(|e| table(i + 1, 0, e.to_string()))?;
        let row = rec.position().map_or(i + 1, |p| p.line() as usize);
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => return Err(table(row, rec.len(), format!("ragged row: {} cells, expected {w}", rec.len()))),
            _ => {}
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| table(row, j + 1, format!("non-numeric cell {cell:?}")))?;
            if !v.is_finite() {
                return Err(table(row, j + 1, "non-finite value".into()));
            }
            values.push(v);
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| table(0, 0, "no rows".into()))?;
    Ok((Grid::new(rows, width)?, values))
}

/// Stacks per-frame CSV grids into a video starting at `t = 0`.
pub fn ingest_csv_grid<P: AsRef<Path>>(paths: &[P], dt: f64) -> Result<VideoGrid> {
    if paths.is_empty() {
        return Err(Error::InvalidInput("no CSV frames given".into()));
    }
    let mut grid = None;
    let mut frames = Vec::with_capacity(paths.len());
    for p in paths {
        let p = p.as_ref();
        let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
        let (g, f) = parse_csv_grid(&text, &p.display().to_string())?;
        match grid {
            None => grid = Some(g),
            Some(g0) if g0 != g => {
                return Err(Error::Shape(format!(
                    "{}: frame is {}×{}, earlier frames are {}×{}",
                    p.display(),
                    g.height,
                    g.width,
                    g0.height,
                    g0.width
                )))
            }
            _ => {}
        }
        frames.push(f);
    }
    VideoGrid::new(grid.expect("non-empty"), 0.0, dt, frames)
}

/// Row-major frame as CSV text with an optional `#` provenance line.
pub fn format_csv_grid(frame: &[f64], grid: Grid, meta: Option<&Provenance>) -> String {
    let mut s = String::new();
    if let Some(m) = meta {
        s.push_str(&m.meta_line());
        s.push('\n');
    }
    for row in frame.chunks(grid.width) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn write_csv_grid(path: impl AsRef<Path>, frame: &[f64], grid: Grid, meta: Option<&Provenance>) -> Result<()> {
    write_file(path.as_ref(), format_csv_grid(frame, grid, meta).as_bytes())
}

/// Config hash, seed and tool version attached to every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(config_text: &str, seed: u64) -> Self {
        Self {
            config_hash: sha256_hex(config_text.as_bytes()),
            seed,
            tool_version: TOOL_VERSION.to_string(),
        }
    }

    pub fn meta_line(&self) -> String {
        format!(
            "# config_hash={} seed={} tool=neuraldmd {}",
            self.config_hash, self.seed, self.tool_version
        )
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    pub fn write_sidecar(&self, artifact: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_file(&Self::sidecar_path(artifact.as_ref()), text.as_bytes())
    }

    pub fn read_sidecar(artifact: impl AsRef<Path>) -> Result<Self> {
        let p = Self::sidecar_path(artifact.as_ref());
        let text = fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn format_history(rows: &[HistoryRow], meta: Option<&Provenance>) -> String {
    let mut s = String::new();
    if let Some(m) = meta {
        s.push_str(&m.meta_line());
        s.push('\n');
    }
    s.push_str("epoch,loss,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.lr));
    }
    s
}

pub fn write_history(path: impl AsRef<Path>, rows: &[HistoryRow], meta: Option<&Provenance>) -> Result<()> {
    write_file(path.as_ref(), format_history(rows, meta).as_bytes())
}

pub fn parse_history(text: &str, label: &str) -> Result<Vec<HistoryRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Table {
        file: label.into(),
        row: 1,
        column: 0,
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != ["epoch", "loss", "lr"] {
        return Err(Error::Table {
            file: label.into(),
            row: 1,
            column: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Table {
            file: label.into(),
            row: 0,
            column: 0,
            message: e.to_string(),
        })?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let cell = |j: usize| -> Result<&str> {
            rec.get(j).ok_or_else(|| Error::Table {
                file: label.into(),
                row,
                column: j + 1,
                message: "missing cell".into(),
            })
        };
        let bad = |j: usize| Error::Table {
            file: label.into(),
            row,
            column: j + 1,
            message: "non-numeric cell".into(),
        };
        out.push(HistoryRow {
            epoch: cell(0)?.parse().map_err(|_| bad(0))?,
            loss: cell(1)?.parse().map_err(|_| bad(1))?,
            lr: cell(2)?.parse().map_err(|_| bad(2))?,
        });
    }
    Ok(out)
}

/// One named array in an NDMD container.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Text(String),
}

impl Entry {
    fn tag(&self) -> u8 {
        match self {
            Entry::F64(_) => 0,
            Entry::U64(_) => 1,
            Entry::Text(_) => 2,
        }
    }
}

/// Versioned list of length-prefixed named arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub entries: Vec<(String, Entry)>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, e: Entry) {
        self.entries.push((name.into(), e));
    }

    fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Contract(format!("checkpoint is missing array {name:?}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name)? {
            Entry::F64(v) => Ok(v),
            _ => Err(Error::Contract(format!("checkpoint array {name:?} is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Entry::U64(v) => Ok(v),
            _ => Err(Error::Contract(format!("checkpoint array {name:?} is not u64"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Entry::Text(s) => Ok(s),
            _ => Err(Error::Contract(format!("checkpoint array {name:?} is not text"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.tag());
            match e {
                Entry::F64(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Entry::U64(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Entry::Text(s) => {
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("checkpoint", bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32()?;
        let mut c = Container::default();
        for _ in 0..count {
            let name_at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err(name_at, "array name is not UTF-8"))?
                .to_string();
            let tag_at = r.pos;
            let tag = r.u8()?;
            let n = r.u64()? as usize;
            let width = if tag == 2 { 1 } else { 8 };
            let payload = r.take(n.checked_mul(width).ok_or_else(|| r.err(tag_at, "array length overflows"))?)?;
            let e = match tag {
                0 => Entry::F64(payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect()),
                1 => Entry::U64(payload.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().expect("8"))).collect()),
                2 => Entry::Text(
                    std::str::from_utf8(payload)
                        .map_err(|_| r.err(tag_at, "text array is not UTF-8"))?
                        .to_string(),
                ),
                t => return Err(r.err(tag_at, format!("unknown array type tag {t}"))),
            };
            c.entries.push((name, e));
        }
        r.finish()?;
        Ok(c)
    }
}

fn put_network(c: &mut Container, prefix: &str, net: &NetworkParams) {
    let spec = net.spec();
    c.push(format!("{prefix}.sizes"), Entry::U64(spec.sizes.iter().map(|&s| s as u64).collect()));
    c.push(
        format!("{prefix}.activations"),
        Entry::U64(spec.activations.iter().map(|a| a.code() as u64).collect()),
    );
    let mut flat = Vec::with_capacity(net.num_params());
    net.write_flat(&mut flat);
    c.push(format!("{prefix}.params"), Entry::F64(flat));
}

fn get_network(c: &Container, prefix: &str) -> Result<NetworkParams> {
    let sizes: Vec<usize> = c.u64s(&format!("{prefix}.sizes"))?.iter().map(|&s| s as usize).collect();
    let activations = c
        .u64s(&format!("{prefix}.activations"))?
        .iter()
        .map(|&a| {
            u8::try_from(a)
                .ok()
                .and_then(Activation::from_code)
                .ok_or_else(|| Error::Contract(format!("{prefix}: unknown activation code {a}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut net = NetworkParams::init(&NetworkSpec { sizes, activations }, 0)?;
    let flat = c.f64s(&format!("{prefix}.params"))?;
    if flat.len() != net.num_params() {
        return Err(Error::Contract(format!(
            "{prefix}: {} parameters stored, architecture needs {}",
            flat.len(),
            net.num_params()
        )));
    }
    net.read_flat(flat)?;
    Ok(net)
}

fn put_source(c: &mut Container, prefix: &str, s: &CoefficientSource) {
    match s {
        CoefficientSource::Network { latent, net } => {
            c.push(format!("{prefix}.latent"), Entry::F64(latent.as_slice().to_vec()));
            put_network(c, &format!("{prefix}.net"), net);
        }
        CoefficientSource::Free { raw } => c.push(format!("{prefix}.raw"), Entry::F64(raw.clone())),
    }
}

fn get_source(c: &Container, prefix: &str) -> Result<CoefficientSource> {
    if c.has(&format!("{prefix}.raw")) {
        return Ok(CoefficientSource::Free {
            raw: c.f64s(&format!("{prefix}.raw"))?.to_vec(),
        });
    }
    Ok(CoefficientSource::Network {
        latent: DVector::from_column_slice(c.f64s(&format!("{prefix}.latent"))?),
        net: get_network(c, &format!("{prefix}.net"))?,
    })
}

fn put_posenc(c: &mut Container, p: &PosEncConfig) {
    c.push("posenc", Entry::U64(vec![p.degree as u64, p.input_dim as u64]));
}

fn get_posenc(c: &Container) -> Result<PosEncConfig> {
    match c.u64s("posenc")? {
        [d, i] => PosEncConfig::new(*d as usize, *i as usize),
        other => Err(Error::Contract(format!("posenc needs 2 values, got {}", other.len()))),
    }
}

fn one<T: Copy>(v: &[T], name: &str) -> Result<T> {
    match v {
        [x] => Ok(*x),
        _ => Err(Error::Contract(format!("{name} needs exactly one value, got {}", v.len()))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointModel {
    NeuralDmd(NeuralModalModel),
    NeuralRep(NeuralRepModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CheckpointModel,
    pub state: Option<TrainState>,
    pub provenance: Option<Provenance>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::default();
        match &self.model {
            CheckpointModel::NeuralDmd(m) => {
                c.push("kind", Entry::Text("neuraldmd".into()));
                put_posenc(&mut c, &m.posenc);
                c.push("window", Entry::F64(vec![m.window_start, m.window_len]));
                put_network(&mut c, "modal", &m.modal_net);
                c.push("spectrum.k", Entry::U64(vec![m.spectrum.k as u64]));
                c.push("spectrum.time_scale", Entry::F64(vec![m.spectrum.time_scale]));
                put_source(&mut c, "spectrum", &m.spectrum.source);
                put_source(&mut c, "initial_state", &m.initial_state.source);
            }
            CheckpointModel::NeuralRep(m) => {
                c.push("kind", Entry::Text("neural_rep".into()));
                put_posenc(&mut c, &m.posenc);
                c.push("window", Entry::F64(vec![m.window_start, m.window_len]));
                put_network(&mut c, "net", &m.net);
            }
        }
        if let Some(s) = &self.state {
            c.push(
                "train.counters",
                Entry::U64(vec![s.epoch as u64, s.step, s.since_improvement as u64]),
            );
            c.push("train.lr", Entry::F64(vec![s.lr]));
            c.push("train.best_loss", Entry::F64(s.best_loss.into_iter().collect()));
            c.push("train.m", Entry::F64(s.m.clone()));
            c.push("train.v", Entry::F64(s.v.clone()));
        }
        if let Some(p) = &self.provenance {
            c.push("provenance", Entry::Text(serde_json::to_string(p)?));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let window = c.f64s("window")?;
        let [start, len] = window else {
            return Err(Error::Contract("window needs 2 values".into()));
        };
        let posenc = get_posenc(c)?;
        let model = match c.text("kind")? {
            "neuraldmd" => CheckpointModel::NeuralDmd(NeuralModalModel::from_parts(
                get_network(c, "modal")?,
                posenc,
                SpectrumParams {
                    k: one(c.u64s("spectrum.k")?, "spectrum.k")? as usize,
                    source: get_source(c, "spectrum")?,
                    time_scale: one(c.f64s("spectrum.time_scale")?, "spectrum.time_scale")?,
                },
                InitialStateParams {
                    source: get_source(c, "initial_state")?,
                },
                *start,
                *len,
            )?),
            "neural_rep" => CheckpointModel::NeuralRep(NeuralRepModel {
                net: get_network(c, "net")?,
                posenc,
                window_start: *start,
                window_len: *len,
            }),
            other => return Err(Error::Contract(format!("unknown checkpoint model kind {other:?}"))),
        };
        let state = if c.has("train.counters") {
            let [epoch, step, since] = c.u64s("train.counters")? else {
                return Err(Error::Contract("train.counters needs 3 values".into()));
            };
            let best = c.f64s("train.best_loss")?;
            Some(TrainState {
                epoch: *epoch as usize,
                step: *step,
                m: c.f64s("train.m")?.to_vec(),
                v: c.f64s("train.v")?.to_vec(),
                best_loss: if best.is_empty() { None } else { Some(one(best, "train.best_loss")?) },
                since_improvement: *since as usize,
                lr: one(c.f64s("train.lr")?, "train.lr")?,
            })
        } else {
            None
        };
        let provenance = if c.has("provenance") {
            Some(serde_json::from_str(c.text("provenance")?)?)
        } else {
            None
        };
        Ok(Self {
            model,
            state,
            provenance,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.encode())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::decode(bytes)?)
    }
}

pub fn checkpoint_write(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_file(path.as_ref(), &ckpt.encode()?)
}

pub fn checkpoint_read(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&read_file(path.as_ref())?)
}

/// JSON form of a decomposition with full-precision modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionRecord {
    pub height: usize,
    pub width: usize,
    pub layout: String,
    /// Per mode, interleaved `[re, im]` pairs in row-major pixel order.
    pub modes: Vec<Vec<[f64; 2]>>,
    pub omega: Vec<[f64; 2]>,
    pub b: Vec<[f64; 2]>,
    pub time_origin: f64,
    pub time_unit: f64,
    pub time_scale: f64,
    pub flagged: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

fn pair(c: &Complex64) -> [f64; 2] {
    [c.re, c.im]
}

fn unpair(p: &[f64; 2]) -> Complex64 {
    Complex64::new(p[0], p[1])
}

impl DecompositionRecord {
    pub fn from_decomposition(d: &ModalDecomposition, provenance: Option<Provenance>) -> Self {
        Self {
            height: d.height,
            width: d.width,
            layout: match d.layout {
                ModeLayout::ConjugatePairs => "conjugate_pairs".into(),
                ModeLayout::Free => "free".into(),
            },
            modes: d.modes.iter().map(|m| m.iter().map(pair).collect()).collect(),
            omega: d.omega.iter().map(pair).collect(),
            b: d.b.iter().map(pair).collect(),
            time_origin: d.time.origin,
            time_unit: d.time.unit,
            time_scale: d.time.scale,
            flagged: d.flagged.clone(),
            provenance,
        }
    }

    pub fn to_decomposition(&self) -> Result<ModalDecomposition> {
        let layout = match self.layout.as_str() {
            "conjugate_pairs" => ModeLayout::ConjugatePairs,
            "free" => ModeLayout::Free,
            other => return Err(Error::Contract(format!("unknown mode layout {other:?}"))),
        };
        let mut d = ModalDecomposition::new(
            self.height,
            self.width,
            layout,
            self.modes.iter().map(|m| m.iter().map(unpair).collect()).collect(),
            self.omega.iter().map(unpair).collect(),
            self.b.iter().map(unpair).collect(),
            TimeAxis {
                origin: self.time_origin,
                unit: self.time_unit,
                scale: self.time_scale,
            },
        )?;
        if self.flagged.len() != d.flagged.len() {
            return Err(Error::Shape("flag count does not match mode count".into()));
        }
        d.flagged = self.flagged.clone();
        Ok(d)
    }
}

pub fn write_decomposition_json(path: impl AsRef<Path>, d: &ModalDecomposition, provenance: Option<Provenance>) -> Result<()> {
    let rec = DecompositionRecord::from_decomposition(d, provenance);
    let mut buf = Vec::new();
    serde_json::to_writer(&mut buf, &rec)?;
    buf.write_all(b"\n")?;
    write_file(path.as_ref(), &buf)
}

pub fn read_decomposition_json(path: impl AsRef<Path>) -> Result<ModalDecomposition> {
    let p = path.as_ref();
    let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
    let rec: DecompositionRecord = serde_json::from_str(&text)?;
    rec.to_decomposition()
}

/// Mode grids as an NVID stack: frames alternate real and imaginary parts.
pub fn modes_as_video(d: &ModalDecomposition) -> Result<VideoGrid> {
    let frames = d
        .modes
        .iter()
        .flat_map(|m| [m.iter().map(|c| c.re).collect(), m.iter().map(|c| c.im).collect()])
        .collect();
    VideoGrid::new(Grid::new(d.height, d.width)?, 0.0, 1.0, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::NeuralRepConfig;
    use crate::neuraldmd::{CoefficientKind, ModelConfig};
    use proptest::prelude::*;

    fn small_video() -> VideoGrid {
        let frames = (0..3)
            .map(|k| (0..6).map(|p| (k * 6 + p) as f64 * 0.25 - 1.5).collect())
            .collect();
        VideoGrid::new(Grid::new(2, 3).unwrap(), 0.5, 0.125, frames).unwrap()
    }

    #[test]
    fn nvid_round_trip() {
        let v = small_video();
        let bytes = encode_nvid(&v);
        assert_eq!(bytes.len(), NVID_HEADER + 4 * 18);
        let back = decode_nvid(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode_nvid(&back), bytes);
    }

    #[test]
    fn nvid_golden_bytes() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"NVID");
        bytes.extend_from_slice(&[1, 0, 0, 0]);
        bytes.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        bytes.extend_from_slice(&[0; 8]);
        // 1.0 as f64: exponent 0x3ff
        bytes.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0xf0, 0x3f]);
        // 0.5 as f32: 0x3f000000
        bytes.extend_from_slice(&[0, 0, 0, 0x3f]);
        let v = decode_nvid(&bytes).unwrap();
        assert_eq!(v.frames, vec![vec![0.5]]);
        assert_eq!((v.t0, v.dt), (0.0, 1.0));
        assert_eq!(encode_nvid(&v), bytes);
    }

    #[test]
    fn nvid_guards() {
        let mut bytes = encode_nvid(&small_video());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_nvid(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut ver = bytes.clone();
        ver[4] = 2;
        assert!(matches!(decode_nvid(&ver), Err(Error::Version { found: 2, expected: 1, .. })));
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_nvid(short), Err(Error::Parse { .. })));
        bytes.push(0);
        assert!(matches!(decode_nvid(&bytes), Err(Error::Parse { offset, .. }) if offset as usize == NVID_HEADER + 72));
        assert!(matches!(decode_nvid(b"NV"), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_grid_parsing() {
        let (g, f) = parse_csv_grid("0,0\n0,0\n", "a.csv").unwrap();
        assert_eq!((g.height, g.width), (2, 2));
        assert_eq!(f, vec![0.0; 4]);
        match parse_csv_grid("1,2\n3,x\n", "b.csv") {
            Err(Error::Table { file, row, column, .. }) => assert_eq!((file.as_str(), row, column), ("b.csv", 2, 2)),
            other => panic!("{other:?}"),
        }
        match parse_csv_grid("1,2\n3\n", "c.csv") {
            Err(Error::Table { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
        let (_, f) = parse_csv_grid("# config_hash=abc seed=1\n1.5,-2\n", "d.csv").unwrap();
        assert_eq!(f, vec![1.5, -2.0]);
    }

    #[test]
    fn csv_ingest_and_nvid_cross_check() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("f0.csv");
        let b = dir.path().join("f1.csv");
        fs::write(&a, "0.1,0.2,0.3\n1,2,3\n").unwrap();
        fs::write(&b, "4,5,6\n7,8,9.75\n").unwrap();
        let v = ingest_csv_grid(&[&a, &b], 0.5).unwrap();
        let back = decode_nvid(&encode_nvid(&v)).unwrap();
        for (f, g) in v.frames.iter().zip(&back.frames) {
            for (x, y) in f.iter().zip(g) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
        let c = dir.path().join("f2.csv");
        fs::write(&c, "1,2\n3,4\n").unwrap();
        let err = ingest_csv_grid(&[&a, &c], 0.5).unwrap_err().to_string();
        assert!(err.contains("f2.csv"), "{err}");
        assert!(ingest_csv_grid(&[dir.path().join("missing.csv")], 0.5).is_err());
    }

    #[test]
    fn csv_grid_round_trip() {
        let g = Grid::new(2, 2).unwrap();
        let frame = vec![0.1, 1e-300, -3.0, 2.0f64.sqrt()];
        let meta = Provenance::new("seed = 1", 1);
        let text = format_csv_grid(&frame, g, Some(&meta));
        assert!(text.starts_with("# config_hash="));
        assert_eq!(parse_csv_grid(&text, "x").unwrap().1, frame);
    }

    #[test]
    fn history_round_trip() {
        let rows = vec![
            HistoryRow {
                epoch: 1,
                loss: 0.1 + 0.2,
                lr: 1e-3,
            },
            HistoryRow {
                epoch: 2,
                loss: 1.0 / 3.0,
                lr: 5e-4,
            },
        ];
        let text = format_history(&rows, Some(&Provenance::new("a", 2)));
        assert_eq!(parse_history(&text, "h").unwrap(), rows);
        assert!(parse_history("epoch,loss\n1,2\n", "h").is_err());
    }

    #[test]
    fn provenance_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nvid");
        let meta = Provenance::new("seed = 3\n", 3);
        assert_eq!(meta.config_hash.len(), 64);
        meta.write_sidecar(&p).unwrap();
        assert_eq!(Provenance::read_sidecar(&p).unwrap(), meta);
        assert!(dir.path().join("v.nvid.meta.json").exists());
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    fn small_model(generator: CoefficientKind) -> NeuralModalModel {
        let cfg = ModelConfig {
            k: 2,
            posenc_degree: 2,
            modal_width: 8,
            modal_depth: 2,
            coef_width: 6,
            coef_depth: 1,
            latent_dim: 3,
            generator,
            seed: 11,
            ..Default::default()
        };
        NeuralModalModel::new(&cfg, 0.25, 3.0).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let grid = Grid::new(5, 4).unwrap();
        for generator in [CoefficientKind::Network, CoefficientKind::Free] {
            let m = small_model(generator);
            let state = TrainState {
                epoch: 7,
                step: 70,
                m: (0..4).map(|i| i as f64 * 0.1).collect(),
                v: vec![1e-9, 2e-9],
                best_loss: Some(0.123),
                since_improvement: 3,
                lr: 2.5e-4,
            };
            let ck = Checkpoint {
                model: CheckpointModel::NeuralDmd(m.clone()),
                state: Some(state),
                provenance: Some(Provenance::new("x", 4)),
            };
            let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
            assert_eq!(back, ck);
            let CheckpointModel::NeuralDmd(m2) = back.model else { panic!() };
            assert_eq!(m.render_frame(grid, 0.4).unwrap(), m2.render_frame(grid, 0.4).unwrap());
        }
        let rep = NeuralRepModel::new(
            &NeuralRepConfig {
                width: 8,
                depth: 2,
                ..Default::default()
            },
            0.0,
            1.0,
        )
        .unwrap();
        let ck = Checkpoint {
            model: CheckpointModel::NeuralRep(rep),
            state: None,
            provenance: None,
        };
        assert_eq!(Checkpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
    }

    #[test]
    fn checkpoint_guards() {
        let ck = Checkpoint {
            model: CheckpointModel::NeuralDmd(small_model(CoefficientKind::Network)),
            state: None,
            provenance: None,
        };
        let bytes = ck.encode().unwrap();
        for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Parse { .. })), "cut {cut}");
        }
        let mut ver = bytes.clone();
        ver[4] = 9;
        let err = Checkpoint::decode(&ver).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, expected: 1, .. }));
        let msg = err.to_string();
        assert!(msg.contains('9') && msg.contains('1'));
        assert!(matches!(Checkpoint::decode(&encode_nvid(&small_video())), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn decomposition_json_round_trip() {
        let spec = crate::datagen::LinearModalSpec::seeded(2, 1.0, 0.1, 3);
        let (_, d) = crate::datagen::gen_linear_modal(&spec, 2, 4, 5, 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("truth.json");
        write_decomposition_json(&p, &d, None).unwrap();
        let back = read_decomposition_json(&p).unwrap();
        assert_eq!(back.modes, d.modes);
        assert_eq!(back.omega, d.omega);
        assert_eq!(back.reconstruct(0.3, false), d.reconstruct(0.3, false));
        let v = modes_as_video(&d).unwrap();
        assert_eq!(v.num_frames(), 6);
    }

    proptest! {
        #[test]
        fn nvid_round_trip_prop(t in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u32>(), t0 in -10.0f64..10.0, dt in 0.01f64..5.0) {
            let frames: Vec<Vec<f64>> = (0..t)
                .map(|k| (0..h * w).map(|p| ((seed as f64 + (k * 31 + p) as f64).sin() * 100.0) as f32 as f64).collect())
                .collect();
            let v = VideoGrid::new(Grid::new(h, w).unwrap(), t0, dt, frames).unwrap();
            prop_assert_eq!(decode_nvid(&encode_nvid(&v)).unwrap(), v);
        }

        #[test]
        fn container_rejects_truncation(cut in 0usize..60) {
            let mut c = Container::default();
            c.push("a", Entry::F64(vec![1.0, 2.0]));
            c.push("b", Entry::Text("hi".into()));
            c.push("c", Entry::U64(vec![3]));
            let bytes = c.encode();
            prop_assert_eq!(Container::decode(&bytes).unwrap(), c);
            if cut < bytes.len() {
                prop_assert!(Container::decode(&bytes[..cut]).is_err());
            }
        }
    }
}
