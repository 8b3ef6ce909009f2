//! Single-file binary checkpoints: magic header, version, then named
//! sections of little-endian payloads. Everything that affects the
//! continuation of a run is captured — raw parameters, the refinement
//! snapshot, background weights, optimizer moments, the gradient
//! accumulator, the iteration counter, and the stage seeds (the RNG streams
//! are counter-based, so seed + iteration *is* the generator state). Round
//! trips are bit-exact.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use crate::adaptive::GradAccumulator;
use crate::error::GsError;
use crate::gaussians::GaussianCloud;
use crate::rasterizer::{BackgroundMlp, BackgroundModel, MLP_PARAM_COUNT};

use super::adam::Adam;

const MAGIC: &[u8; 8] = b"GSGENCK1";
const VERSION: u32 = 1;

/// Full optimizer-visible state at one iteration boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Global iteration this state was captured after (0 = before training).
    pub iteration: u64,
    pub geometry_seed: u64,
    pub refine_seed: u64,
    /// Hash of the originating [`super::TrainConfig`]; resume refuses a
    /// mismatch.
    pub config_hash: u64,
    /// Stage provenance: the geometry stage ran to completion (or was
    /// explicitly configured with zero iterations).
    pub geometry_done: bool,
    pub refine_done: bool,
    pub cloud: GaussianCloud<f32>,
    pub background: BackgroundModel<f32>,
    pub adam: Adam,
    pub accumulator: GradAccumulator<f32>,
}

fn ck_err(msg: impl Into<String>) -> GsError {
    GsError::Checkpoint(msg.into())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3s(&mut self, vs: &[Vector3<f32>]) {
        for v in vs {
            for a in 0..3 {
                self.f32(v[a]);
            }
        }
    }
    fn vec4s(&mut self, vs: &[Vector4<f32>]) {
        for v in vs {
            for a in 0..4 {
                self.f32(v[a]);
            }
        }
    }
    fn f32s(&mut self, vs: &[f32]) {
        for &v in vs {
            self.f32(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GsError> {
        if self.pos + n > self.buf.len() {
            return Err(ck_err(format!("section '{}' is truncated", self.section)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, GsError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, GsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, GsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, GsError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, GsError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec3s(&mut self, n: usize) -> Result<Vec<Vector3<f32>>, GsError> {
        (0..n)
            .map(|_| Ok(Vector3::new(self.f32()?, self.f32()?, self.f32()?)))
            .collect()
    }
    fn vec4s(&mut self, n: usize) -> Result<Vec<Vector4<f32>>, GsError> {
        (0..n)
            .map(|_| Ok(Vector4::new(self.f32()?, self.f32()?, self.f32()?, self.f32()?)))
            .collect()
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, GsError> {
        (0..n).map(|_| self.f32()).collect()
    }
    fn finish(self) -> Result<(), GsError> {
        if self.pos != self.buf.len() {
            return Err(ck_err(format!(
                "section '{}' has {} trailing bytes",
                self.section,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn push_section(out: &mut Vec<u8>, name: &str, payload: Vec<u8>) {
    out.push(name.len() as u8);
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
}

fn background_param_len(kind: u8) -> usize {
    if kind == 0 {
        0
    } else {
        MLP_PARAM_COUNT
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.cloud.len();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let mut w = Writer { buf: Vec::new() };
        w.u64(self.iteration);
        w.u64(self.geometry_seed);
        w.u64(self.refine_seed);
        w.u64(self.config_hash);
        w.u8(u8::from(self.geometry_done) | (u8::from(self.refine_done) << 1));
        push_section(&mut out, "meta", w.buf);

        let mut w = Writer { buf: Vec::new() };
        w.u32(n as u32);
        w.vec3s(&self.cloud.positions);
        w.vec3s(&self.cloud.log_scales);
        w.vec4s(&self.cloud.rotations);
        w.vec3s(&self.cloud.color_params);
        w.f32s(&self.cloud.opacity_logits);
        push_section(&mut out, "gaussians", w.buf);

        let mut w = Writer { buf: Vec::new() };
        match &self.cloud.snapshot_positions {
            Some(s) => {
                w.u8(1);
                w.vec3s(s);
            }
            None => w.u8(0),
        }
        push_section(&mut out, "snapshot", w.buf);

        let mut w = Writer { buf: Vec::new() };
        match &self.background {
            BackgroundModel::Constant(color) => {
                w.u8(0);
                for a in 0..3 {
                    w.f32(color[a]);
                }
            }
            BackgroundModel::Mlp(mlp) => {
                w.u8(1);
                w.f32s(&mlp.to_flat());
            }
        }
        push_section(&mut out, "background", w.buf);

        let mut w = Writer { buf: Vec::new() };
        w.u64(self.adam.step_count);
        w.f64(self.adam.beta1);
        w.f64(self.adam.beta2);
        w.f64(self.adam.eps);
        for bank in [&self.adam.m, &self.adam.v] {
            w.vec3s(&bank.positions);
            w.vec3s(&bank.log_scales);
            w.vec4s(&bank.rotations);
            w.vec3s(&bank.color_params);
            w.f32s(&bank.opacity_logits);
            w.f32s(&bank.background);
        }
        push_section(&mut out, "adam", w.buf);

        let mut w = Writer { buf: Vec::new() };
        w.f32s(&self.accumulator.sums);
        for &count in &self.accumulator.counts {
            w.u32(count);
        }
        push_section(&mut out, "accum", w.buf);

        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GsError> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(ck_err("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(ck_err(format!("unsupported checkpoint version {version}")));
        }

        let mut sections: HashMap<String, &[u8]> = HashMap::new();
        let mut pos = 12;
        while pos < bytes.len() {
            let name_len = bytes[pos] as usize;
            pos += 1;
            if pos + name_len + 8 > bytes.len() {
                return Err(ck_err("corrupt section table"));
            }
            let name = std::str::from_utf8(&bytes[pos..pos + name_len])
                .map_err(|_| ck_err("corrupt section name"))?
                .to_string();
            pos += name_len;
            let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
            pos += 8;
            if pos + len > bytes.len() {
                return Err(ck_err(format!("section '{name}' exceeds file size")));
            }
            sections.insert(name, &bytes[pos..pos + len]);
            pos += len;
        }
        let section = |name: &'static str| -> Result<Reader<'_>, GsError> {
            sections
                .get(name)
                .map(|buf| Reader { buf, pos: 0, section: name })
                .ok_or_else(|| ck_err(format!("missing section '{name}'")))
        };

        let mut r = section("meta")?;
        let iteration = r.u64()?;
        let geometry_seed = r.u64()?;
        let refine_seed = r.u64()?;
        let config_hash = r.u64()?;
        let flags = r.u8()?;
        r.finish()?;

        let mut r = section("gaussians")?;
        let n = r.u32()? as usize;
        let cloud = GaussianCloud {
            positions: r.vec3s(n)?,
            log_scales: r.vec3s(n)?,
            rotations: r.vec4s(n)?,
            color_params: r.vec3s(n)?,
            opacity_logits: r.f32s(n)?,
            snapshot_positions: None,
        };
        r.finish()?;

        let mut r = section("snapshot")?;
        let snapshot = if r.u8()? == 1 { Some(r.vec3s(n)?) } else { None };
        r.finish()?;
        let mut cloud = cloud;
        cloud.snapshot_positions = snapshot;

        let mut r = section("background")?;
        let kind = r.u8()?;
        let background = match kind {
            0 => {
                let c = Vector3::new(r.f32()?, r.f32()?, r.f32()?);
                BackgroundModel::Constant(c)
            }
            1 => BackgroundModel::Mlp(
                BackgroundMlp::from_flat(&r.f32s(MLP_PARAM_COUNT)?)
                    .ok_or_else(|| ck_err("background weight count mismatch"))?,
            ),
            k => return Err(ck_err(format!("unknown background kind {k}"))),
        };
        r.finish()?;

        let mut r = section("adam")?;
        let mut adam = Adam::new(n, &background);
        adam.step_count = r.u64()?;
        adam.beta1 = r.f64()?;
        adam.beta2 = r.f64()?;
        adam.eps = r.f64()?;
        let bg_len = background_param_len(kind);
        for bank in [&mut adam.m, &mut adam.v] {
            bank.positions = r.vec3s(n)?;
            bank.log_scales = r.vec3s(n)?;
            bank.rotations = r.vec4s(n)?;
            bank.color_params = r.vec3s(n)?;
            bank.opacity_logits = r.f32s(n)?;
            bank.background = r.f32s(bg_len)?;
        }
        r.finish()?;

        let mut r = section("accum")?;
        let accumulator = GradAccumulator {
            sums: r.f32s(n)?,
            counts: (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?,
        };
        r.finish()?;

        let ck = Checkpoint {
            iteration,
            geometry_seed,
            refine_seed,
            config_hash,
            geometry_done: flags & 1 != 0,
            refine_done: flags & 2 != 0,
            cloud,
            background,
            adam,
            accumulator,
        };
        ck.cloud
            .validate_shape()
            .map_err(|e| ck_err(format!("inconsistent gaussian arrays: {e}")))?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), GsError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GsError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
