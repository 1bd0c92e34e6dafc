//! Plug-in model interface, reference models and the patch runner.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genproc::{
    bridge_sample, ddim_sample, flow_sample, oracle, toy_decode, toy_encode, BridgeSchedule, LatentTensor,
    NoiseSchedule, COMPRESSION, DDIM_STEPS, LATENT_CHANNELS,
};
use crate::patching::{extract, stitch, ImportanceMap, Patch, PatchGrid};
use crate::volume::{Modality, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GanLike,
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatesOn {
    ImagePatch,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub name: String,
    pub family: Family,
    pub operates_on: OperatesOn,
    pub deterministic: bool,
    /// False forces the runner to call the model from one thread.
    pub thread_safe: bool,
}

/// Per-subject information available to every patch call.
#[derive(Debug, Clone)]
pub struct SubjectContext {
    pub subject_id: String,
    pub target_modality: Modality,
    /// Clip bounds recorded for the target, in original units.
    pub target_clip: Option<(f64, f64)>,
    /// `(mean, std)` recorded for the target.
    pub target_normalization: Option<(f64, f64)>,
    /// Preprocessed target, only handed to oracle models.
    pub reference: Option<Arc<Volume>>,
    pub seed: u64,
}

impl SubjectContext {
    pub fn new(subject_id: impl Into<String>, target_modality: Modality) -> Self {
        SubjectContext {
            subject_id: subject_id.into(),
            target_modality,
            target_clip: None,
            target_normalization: None,
            reference: None,
            seed: 0,
        }
    }
}

/// Where a patch sits in the subject's preprocessed volume.
#[derive(Debug, Clone, Copy)]
pub struct PatchSite<'a> {
    pub origin: [usize; 3],
    pub subject: &'a SubjectContext,
}

impl PatchSite<'_> {
    /// Seed for this patch, stable across runs and schedules.
    pub fn seed(&self) -> u64 {
        let [x, y, z] = self.origin.map(|v| v as u64);
        let mut h = self.subject.seed ^ 0x9e37_79b9_7f4a_7c15;
        for v in [x, y, z] {
            h = (h ^ v).wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

pub trait PatchModel: Send + Sync {
    fn descriptor(&self) -> &ModelDescriptor;
    fn translate(&self, source: &Patch, site: &PatchSite) -> Result<Patch>;
}

/// Models that work in the toy latent space; wrap with [`LatentAdapter`].
pub trait LatentModel: Send + Sync {
    fn descriptor(&self) -> &ModelDescriptor;
    fn translate_latent(&self, z_src: &LatentTensor, site: &PatchSite) -> Result<LatentTensor>;
}

/// Puts the toy codec around a latent model so it sees image patches.
pub struct LatentAdapter<M>(pub M);

impl<M: LatentModel> PatchModel for LatentAdapter<M> {
    fn descriptor(&self) -> &ModelDescriptor {
        self.0.descriptor()
    }

    fn translate(&self, source: &Patch, site: &PatchSite) -> Result<Patch> {
        let z = toy_encode(source, LATENT_CHANNELS)?;
        let out = self.0.translate_latent(&z, site)?;
        Ok(toy_decode(&out))
    }
}

pub struct IdentityModel {
    desc: ModelDescriptor,
}

pub fn identity_model() -> IdentityModel {
    IdentityModel {
        desc: ModelDescriptor {
            name: "identity".into(),
            family: Family::GanLike,
            operates_on: OperatesOn::ImagePatch,
            deterministic: true,
            thread_safe: true,
        },
    }
}

impl PatchModel for IdentityModel {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn translate(&self, source: &Patch, _: &PatchSite) -> Result<Patch> {
        Ok(source.clone())
    }
}

/// Constant prediction: water for CT-like targets, the target mean otherwise.
pub struct BaselineModel {
    desc: ModelDescriptor,
    modality: Option<Modality>,
}

/// Baseline pinned to one target modality.
pub fn baseline_model(modality: Modality) -> BaselineModel {
    BaselineModel {
        modality: Some(modality),
        ..baseline_from_context()
    }
}

/// Baseline that reads the target modality from each subject.
pub fn baseline_from_context() -> BaselineModel {
    BaselineModel {
        desc: ModelDescriptor {
            name: "baseline".into(),
            family: Family::GanLike,
            operates_on: OperatesOn::ImagePatch,
            deterministic: true,
            thread_safe: true,
        },
        modality: None,
    }
}

impl BaselineModel {
    pub fn value(&self, ctx: &SubjectContext) -> Result<f32> {
        let (mean, std) = ctx.target_normalization.ok_or_else(|| {
            Error::Configuration(format!(
                "baseline needs the target normalization record for subject {}",
                ctx.subject_id
            ))
        })?;
        let modality = self.modality.unwrap_or(ctx.target_modality);
        if modality.is_ct_like() {
            let (lo, hi) = ctx.target_clip.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
            Ok(((0.0f64.clamp(lo, hi) - mean) / std) as f32)
        } else {
            // The target mean maps to zero after normalization.
            Ok(0.0)
        }
    }
}

impl PatchModel for BaselineModel {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn translate(&self, source: &Patch, site: &PatchSite) -> Result<Patch> {
        Ok(Patch::filled(source.dims, self.value(site.subject)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Ddim,
    Bridge,
    Flow,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Ddim => "ddim",
            SamplerKind::Bridge => "bridge",
            SamplerKind::Flow => "flow",
        }
    }
}

/// Supplies the known target patch of the given dims at a site.
pub type TargetProvider = Box<dyn Fn([usize; 3], &PatchSite) -> Result<Patch> + Send + Sync>;

/// Runs a real sampler with an analytic predictor built from a known target patch.
pub struct OracleLatentModel {
    desc: ModelDescriptor,
    kind: SamplerKind,
    steps: usize,
    provider: TargetProvider,
    noise: NoiseSchedule,
    bridge: BridgeSchedule,
}

pub fn oracle_latent_model(kind: SamplerKind, provider: TargetProvider) -> LatentAdapter<OracleLatentModel> {
    let steps = match kind {
        SamplerKind::Ddim => DDIM_STEPS,
        SamplerKind::Bridge => 200,
        SamplerKind::Flow => 1,
    };
    LatentAdapter(OracleLatentModel {
        desc: ModelDescriptor {
            name: format!("oracle-{}", kind.as_str()),
            family: Family::Latent,
            operates_on: OperatesOn::Latent,
            deterministic: true,
            thread_safe: true,
        },
        kind,
        steps,
        provider,
        noise: NoiseSchedule::default(),
        bridge: BridgeSchedule::default(),
    })
}

/// Provider that cuts the target patch from the subject's reference volume.
pub fn reference_provider() -> TargetProvider {
    Box::new(|dims: [usize; 3], site: &PatchSite| {
        let reference = site.subject.reference.as_ref().ok_or_else(|| {
            Error::Configuration(format!("oracle model has no reference for subject {}", site.subject.subject_id))
        })?;
        extract(reference, site.origin, dims)
    })
}

impl OracleLatentModel {
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

impl LatentAdapter<OracleLatentModel> {
    pub fn with_steps(self, steps: usize) -> Self {
        LatentAdapter(self.0.with_steps(steps))
    }
}

impl LatentModel for OracleLatentModel {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn translate_latent(&self, z_src: &LatentTensor, site: &PatchSite) -> Result<LatentTensor> {
        let dims = z_src.dims.map(|d| d * COMPRESSION);
        let target = (self.provider)(dims, site)?;
        let z0 = toy_encode(&target, z_src.channels)?;
        match self.kind {
            SamplerKind::Ddim => {
                let p = oracle::NoiseOracle {
                    z0,
                    schedule: &self.noise,
                };
                ddim_sample(z_src, &p, &self.noise, self.steps, site.seed())
            }
            SamplerKind::Bridge => bridge_sample(z_src, &oracle::TargetOracle { z0 }, &self.bridge, self.steps, None),
            SamplerKind::Flow => {
                let v = z0.axpby(1.0, z_src, -1.0)?;
                flow_sample(z_src, &oracle::ConstantVelocity { v }, self.steps)
            }
        }
    }
}

struct ExternalProcess {
    child: Child,
    stdin: ChildStdin,
    stdout: ChildStdout,
}

/// Model backed by a subprocess speaking length-prefixed little-endian f32
/// patches over stdin/stdout.
pub struct ExternalModel {
    desc: ModelDescriptor,
    proc: Mutex<ExternalProcess>,
}

impl ExternalModel {
    pub fn spawn(name: impl Into<String>, program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        Ok(ExternalModel {
            desc: ModelDescriptor {
                name: name.into(),
                family: Family::GanLike,
                operates_on: OperatesOn::ImagePatch,
                deterministic: true,
                thread_safe: false,
            },
            proc: Mutex::new(ExternalProcess { child, stdin, stdout }),
        })
    }
}

impl Drop for ExternalModel {
    fn drop(&mut self) {
        if let Ok(p) = self.proc.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

pub fn encode_frame(values: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * values.len());
    buf.extend_from_slice(&((values.len() * 4) as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn read_frame(r: &mut impl Read) -> std::io::Result<Vec<f32>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let n = u64::from_le_bytes(len) as usize;
    if !n.is_multiple_of(4) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame of {n} bytes is not a whole number of floats"),
        ));
    }
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl PatchModel for ExternalModel {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn translate(&self, source: &Patch, _: &PatchSite) -> Result<Patch> {
        let mut guard = self.proc.lock().map_err(|_| Error::External("model process lock poisoned".into()))?;
        let p = &mut *guard;
        let frame = encode_frame(&source.data);
        // Write from a separate thread so a process that echoes as it reads
        // cannot fill both pipes and deadlock.
        let reply = std::thread::scope(|s| {
            let stdin = &mut p.stdin;
            let writer = s.spawn(move || stdin.write_all(&frame).and_then(|_| stdin.flush()));
            let reply = read_frame(&mut p.stdout);
            let written = writer.join().expect("writer thread panicked");
            written.and(reply)
        })
        .map_err(|e| Error::External(format!("{}: {e}", self.desc.name)))?;
        if reply.len() != source.len() {
            return Err(Error::Contract(format!(
                "{} returned {} values for a {}-voxel patch",
                self.desc.name,
                reply.len(),
                source.len()
            )));
        }
        Patch::new(source.dims, reply)
    }
}

#[derive(Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<dyn PatchModel>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Identity, baseline and the three oracle samplers.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(identity_model())).expect("fresh registry");
        r.register(Arc::new(baseline_from_context())).expect("fresh registry");
        for kind in [SamplerKind::Ddim, SamplerKind::Bridge, SamplerKind::Flow] {
            r.register(Arc::new(oracle_latent_model(kind, reference_provider())))
                .expect("fresh registry");
        }
        r
    }

    pub fn register(&mut self, model: Arc<dyn PatchModel>) -> Result<()> {
        let name = model.descriptor().name.clone();
        if self.models.contains_key(&name) {
            return Err(Error::Conflict(name));
        }
        self.models.insert(name, model);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn PatchModel>> {
        self.models.get(name).cloned().ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }
}

/// Translates every grid window and stitches the result onto the source grid.
pub fn run_model(
    model: &dyn PatchModel,
    source: &Volume,
    ctx: &SubjectContext,
    grid: &PatchGrid,
    imap: &ImportanceMap,
) -> Result<Volume> {
    if source.dims() != grid.dims {
        return Err(Error::Shape(format!(
            "grid planned for {:?}, volume is {:?}",
            grid.dims,
            source.dims()
        )));
    }
    let one = |origin: &[usize; 3]| -> Result<([usize; 3], Patch)> {
        let patch = extract(source, *origin, grid.patch_size)?;
        let site = PatchSite { origin: *origin, subject: ctx };
        let out = model.translate(&patch, &site)?;
        if out.dims != patch.dims {
            return Err(Error::Contract(format!(
                "{} returned {:?} for a {:?} patch",
                model.descriptor().name,
                out.dims,
                patch.dims
            )));
        }
        Ok((*origin, out))
    };
    let outputs: Vec<([usize; 3], Patch)> = if model.descriptor().thread_safe {
        grid.origins.par_iter().map(one).collect::<Result<_>>()?
    } else {
        grid.origins.iter().map(one).collect::<Result<_>>()?
    };
    stitch(&outputs, grid, imap, *source.geometry(), ctx.target_modality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::{build_patch_grid, gaussian_importance};
    use crate::volume::Geometry;

    fn ctx() -> SubjectContext {
        SubjectContext::new("s0", Modality::Ct)
    }

    fn site(c: &SubjectContext) -> PatchSite<'_> {
        PatchSite {
            origin: [0; 3],
            subject: c,
        }
    }

    #[test]
    fn identity_returns_input() {
        let m = identity_model();
        let p = Patch::new([2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let c = ctx();
        assert_eq!(m.translate(&p, &site(&c)).unwrap(), p);
        assert!(m.descriptor().deterministic);
    }

    #[test]
    fn baseline_values() {
        let mut c = ctx();
        c.target_normalization = Some((-200.0, 500.0));
        let p = Patch::filled([4, 4, 4], 9.0);
        let out = baseline_model(Modality::Ct).translate(&p, &site(&c)).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.4).abs() < 1e-7));

        let mut pet = SubjectContext::new("s1", Modality::Pet);
        pet.target_normalization = Some((3.0, 2.0));
        let out = baseline_from_context().translate(&p, &site(&pet)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));

        let missing = ctx();
        assert!(matches!(
            baseline_model(Modality::Ct).translate(&p, &site(&missing)),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn registry_semantics() {
        let mut r = ModelRegistry::new();
        r.register(Arc::new(identity_model())).unwrap();
        assert_eq!(r.get("identity").unwrap().descriptor().name, "identity");
        assert!(matches!(r.get("nonexistent"), Err(Error::Lookup(_))));
        assert!(matches!(r.register(Arc::new(identity_model())), Err(Error::Conflict(_))));
        let builtins = ModelRegistry::with_builtins();
        let all: Vec<&str> = builtins.names().collect();
        assert_eq!(all, vec!["baseline", "identity", "oracle-bridge", "oracle-ddim", "oracle-flow"]);
    }

    #[test]
    fn oracle_constant_target() {
        let c = ctx();
        for kind in [SamplerKind::Ddim, SamplerKind::Bridge, SamplerKind::Flow] {
            let m = oracle_latent_model(kind, Box::new(|d: [usize; 3], _: &PatchSite| Ok(Patch::filled(d, 0.75))));
            let src = Patch::new([8, 8, 8], (0..512).map(|v| (v % 7) as f32).collect()).unwrap();
            let out = m.translate(&src, &site(&c)).unwrap();
            assert!(out.data.iter().all(|&v| (v - 0.75).abs() < 1e-4), "{kind:?}");
        }
    }

    #[test]
    fn oracle_flow_step_count_does_not_matter() {
        let c = ctx();
        let target = Patch::new([8, 8, 8], (0..512).map(|v| (v as f32 * 0.01).sin()).collect()).unwrap();
        let t2 = target.clone();
        let src = Patch::filled([8, 8, 8], -0.3);
        let one = oracle_latent_model(SamplerKind::Flow, Box::new(move |_: [usize; 3], _: &PatchSite| Ok(target.clone())));
        let many = oracle_latent_model(SamplerKind::Flow, Box::new(move |_: [usize; 3], _: &PatchSite| Ok(t2.clone())))
            .with_steps(64);
        let a = one.translate(&src, &site(&c)).unwrap();
        let b = many.translate(&src, &site(&c)).unwrap();
        let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-6);
    }

    #[test]
    fn frame_codec_roundtrip() {
        let vals = vec![1.5f32, -2.0, f32::MAX];
        let buf = encode_frame(&vals);
        assert_eq!(&buf[..8], &12u64.to_le_bytes());
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), vals);
    }

    #[test]
    fn runner_with_baseline_is_constant() {
        let g = Geometry::new([12, 8, 8], [1.0; 3]).unwrap();
        let v = Volume::from_fn(g, Modality::Ct, |x, y, z| (x * y + z) as f32).unwrap();
        let grid = build_patch_grid(v.dims(), [8, 8, 8], 0.5).unwrap();
        let imap = gaussian_importance([8, 8, 8], 0.125).unwrap();
        let mut c = ctx();
        c.target_normalization = Some((-200.0, 500.0));
        let out = run_model(&baseline_from_context(), &v, &c, &grid, &imap).unwrap();
        let first = out.data()[0];
        assert!(out.data().iter().all(|&x| (x - first).abs() < 1e-6));
        assert_eq!(out.dims(), v.dims());
    }
}
