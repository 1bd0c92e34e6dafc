//! Latent generative processes: toy codec, noise schedules and samplers.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::patching::Patch;

/// Spatial compression factor of the toy codec.
pub const COMPRESSION: usize = 4;
pub const LATENT_CHANNELS: usize = 3;

pub const BETA_START: f64 = 0.0015;
pub const BETA_END: f64 = 0.0205;
pub const TRAIN_STEPS: usize = 1000;
pub const DDIM_STEPS: usize = 50;

pub const BRIDGE_M_START: f64 = 0.001;
pub const BRIDGE_M_END: f64 = 0.999;

/// Channel-major latent volume (`data[c * n + voxel]`, x fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(dims: [usize; 3], channels: usize, data: Vec<f64>) -> Result<Self> {
        let n = dims.iter().product::<usize>() * channels;
        if n == 0 || data.len() != n {
            return Err(Error::Shape(format!(
                "latent {dims:?}x{channels} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(LatentTensor { dims, channels, data })
    }

    pub fn filled(dims: [usize; 3], channels: usize, value: f64) -> Self {
        LatentTensor {
            dims,
            channels,
            data: vec![value; dims.iter().product::<usize>() * channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::filled(self.dims, self.channels, 0.0)
    }

    /// Standard-normal draws from a seeded stream.
    pub fn gaussian(dims: [usize; 3], channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::gaussian_from(dims, channels, &mut rng)
    }

    fn gaussian_from(dims: [usize; 3], channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = dims.iter().product::<usize>() * channels;
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        LatentTensor { dims, channels, data }
    }

    pub fn same_shape(&self, other: &LatentTensor) -> bool {
        self.dims == other.dims && self.channels == other.channels
    }

    fn check_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "latent {:?}x{} vs {:?}x{}",
                self.dims, self.channels, other.dims, other.channels
            )))
        }
    }

    /// Elementwise `a·self + b·other`.
    pub fn axpby(&self, a: f64, other: &LatentTensor, b: f64) -> Result<Self> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&x, &y)| a * x + b * y).collect();
        Ok(LatentTensor {
            dims: self.dims,
            channels: self.channels,
            data,
        })
    }

    pub fn scale(&self, a: f64) -> Self {
        LatentTensor {
            dims: self.dims,
            channels: self.channels,
            data: self.data.iter().map(|&x| a * x).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// 4³ average pooling, replicated across `channels`.
pub fn toy_encode(patch: &Patch, channels: usize) -> Result<LatentTensor> {
    if channels == 0 {
        return Err(Error::Parameter("latent needs at least one channel".into()));
    }
    if patch.dims.iter().any(|&d| d % COMPRESSION != 0) {
        return Err(Error::Shape(format!(
            "patch dims {:?} are not divisible by {COMPRESSION}",
            patch.dims
        )));
    }
    let dims = patch.dims.map(|d| d / COMPRESSION);
    let [px, py, _] = patch.dims;
    let mut pooled = vec![0.0f64; dims.iter().product()];
    for z in 0..patch.dims[2] {
        for y in 0..py {
            for x in 0..px {
                let cell = x / COMPRESSION + dims[0] * (y / COMPRESSION + dims[1] * (z / COMPRESSION));
                pooled[cell] += patch.data[x + px * (y + py * z)] as f64;
            }
        }
    }
    let block = (COMPRESSION * COMPRESSION * COMPRESSION) as f64;
    for v in &mut pooled {
        *v /= block;
    }
    let mut data = Vec::with_capacity(pooled.len() * channels);
    for _ in 0..channels {
        data.extend_from_slice(&pooled);
    }
    LatentTensor::new(dims, channels, data)
}

/// Channel mean followed by nearest-neighbour upsampling.
pub fn toy_decode(z: &LatentTensor) -> Patch {
    let n: usize = z.dims.iter().product();
    let mean: Vec<f64> = (0..n)
        .map(|i| (0..z.channels).map(|c| z.data[c * n + i]).sum::<f64>() / z.channels as f64)
        .collect();
    let dims = z.dims.map(|d| d * COMPRESSION);
    let mut data = Vec::with_capacity(dims.iter().product());
    for zz in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let cell = x / COMPRESSION + z.dims[0] * (y / COMPRESSION + z.dims[1] * (zz / COMPRESSION));
                data.push(mean[cell] as f32);
            }
        }
    }
    Patch { dims, data }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_scaled_linear_schedule(beta_start: f64, beta_end: f64, steps: usize) -> Result<NoiseSchedule> {
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    if steps == 0 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
    let betas: Vec<f64> = (0..steps)
        .map(|t| {
            let f = if steps == 1 { 0.0 } else { t as f64 / (steps - 1) as f64 };
            let s = (1.0 - f) * s0 + f * s1;
            s * s
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut acc = 1.0;
    let alpha_bars = alphas
        .iter()
        .map(|a| {
            acc *= a;
            acc
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_scaled_linear_schedule(BETA_START, BETA_END, TRAIN_STEPS).expect("constants are valid")
    }
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::Index {
            index: t,
            len: self.len(),
        })
    }

    /// `t,beta,alpha_bar` rows.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "beta", "alpha_bar"])?;
        for (t, (b, ab)) in self.betas.iter().zip(&self.alpha_bars).enumerate() {
            w.write_record([t.to_string(), b.to_string(), ab.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    pub m: Vec<f64>,
    pub sigma2: Vec<f64>,
}

pub fn make_bridge_schedule(m_start: f64, m_end: f64, steps: usize) -> Result<BridgeSchedule> {
    if !(0.0 <= m_start && m_start < m_end && m_end <= 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 <= m_start < m_end <= 1, got {m_start}, {m_end}"
        )));
    }
    if steps < 2 {
        return Err(Error::Parameter("bridge schedule needs at least two steps".into()));
    }
    let m: Vec<f64> = (0..steps)
        .map(|t| {
            let f = t as f64 / (steps - 1) as f64;
            (1.0 - f) * m_start + f * m_end
        })
        .collect();
    let sigma2 = m.iter().map(|&m| 2.0 * (m - m * m)).collect();
    Ok(BridgeSchedule { m, sigma2 })
}

impl Default for BridgeSchedule {
    fn default() -> Self {
        make_bridge_schedule(BRIDGE_M_START, BRIDGE_M_END, TRAIN_STEPS).expect("constants are valid")
    }
}

impl BridgeSchedule {
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t < self.len() {
            Ok(())
        } else {
            Err(Error::Index {
                index: t,
                len: self.len(),
            })
        }
    }

    /// `t,m,sigma2` rows.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "m", "sigma2"])?;
        for (t, (m, s)) in self.m.iter().zip(&self.sigma2).enumerate() {
            w.write_record([t.to_string(), m.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionKind {
    Noise,
    Target,
    Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Timestep {
    Discrete(usize),
    Continuous(f64),
}

/// Network stand-in queried by the samplers. Conditioning is the source latent.
pub trait Predictor {
    fn kind(&self) -> PredictionKind;
    fn predict(&self, z_t: &LatentTensor, t: Timestep, condition: &LatentTensor) -> Result<LatentTensor>;
}

fn expect_kind(p: &dyn Predictor, want: PredictionKind) -> Result<()> {
    if p.kind() == want {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "sampler needs a {want:?} predictor, got {:?}",
            p.kind()
        )))
    }
}

fn query(p: &dyn Predictor, z: &LatentTensor, t: Timestep, cond: &LatentTensor) -> Result<LatentTensor> {
    let out = p.predict(z, t, cond)?;
    if !out.same_shape(z) {
        return Err(Error::Contract(format!(
            "predictor returned {:?}x{} for input {:?}x{}",
            out.dims, out.channels, z.dims, z.channels
        )));
    }
    Ok(out)
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn ddpm_forward(z0: &LatentTensor, t: usize, eps: &LatentTensor, sched: &NoiseSchedule) -> Result<LatentTensor> {
    let ab = sched.alpha_bar(t)?;
    z0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Evenly spaced sub-schedule, descending, ending at 0.
pub fn ddim_timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::Parameter(format!(
            "sampling steps must be in 1..={train_steps}, got {steps}"
        )));
    }
    let stride = train_steps / steps;
    Ok((0..steps).rev().map(|i| i * stride).collect())
}

/// Deterministic DDIM (η = 0) from seeded Gaussian noise.
pub fn ddim_sample(
    condition: &LatentTensor,
    predictor: &dyn Predictor,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<LatentTensor> {
    expect_kind(predictor, PredictionKind::Noise)?;
    let start = LatentTensor::gaussian(condition.dims, condition.channels, seed);
    ddim_from(start, condition, predictor, sched, steps)
}

/// DDIM trajectory from a caller-supplied starting latent.
pub fn ddim_from(
    mut z: LatentTensor,
    condition: &LatentTensor,
    predictor: &dyn Predictor,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<LatentTensor> {
    expect_kind(predictor, PredictionKind::Noise)?;
    let ts = ddim_timesteps(sched.len(), steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        let ab_prev = match ts.get(i + 1) {
            Some(&tp) => sched.alpha_bar(tp)?,
            None => 1.0,
        };
        let eps = query(predictor, &z, Timestep::Discrete(t), condition)?;
        let x0 = z.axpby(1.0 / ab.sqrt(), &eps, -(1.0 - ab).sqrt() / ab.sqrt())?;
        z = x0.axpby(ab_prev.sqrt(), &eps, (1.0 - ab_prev).sqrt())?;
    }
    Ok(z)
}

/// `z_t = (1−m_t)·z0 + m_t·z_y + σ_t·ε`.
pub fn bridge_forward(
    z0: &LatentTensor,
    z_y: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &BridgeSchedule,
) -> Result<LatentTensor> {
    sched.check(t)?;
    z0.check_shape(z_y)?;
    z0.check_shape(eps)?;
    let m = sched.m[t];
    let s = sched.sigma2[t].sqrt();
    let data = z0
        .data
        .iter()
        .zip(&z_y.data)
        .zip(&eps.data)
        .map(|((&a, &b), &e)| (1.0 - m) * a + m * b + s * e)
        .collect();
    LatentTensor::new(z0.dims, z0.channels, data)
}

/// Decreasing sub-schedule from `T−1` to 0.
pub fn bridge_timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::Parameter(format!(
            "sampling steps must be in 1..={train_steps}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![train_steps - 1]);
    }
    let last = (train_steps - 1) as f64;
    let span = (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| (last * (steps - 1 - i) as f64 / span).round() as usize)
        .collect())
}

/// Reverse bridge from the source latent, re-bridging around each target
/// prediction. With `seed = None` the trajectory is noiseless.
pub fn bridge_sample(
    z_y: &LatentTensor,
    predictor: &dyn Predictor,
    sched: &BridgeSchedule,
    steps: usize,
    seed: Option<u64>,
) -> Result<LatentTensor> {
    expect_kind(predictor, PredictionKind::Target)?;
    let ts = bridge_timesteps(sched.len(), steps)?;
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    let mut z = z_y.clone();
    for (i, &t) in ts.iter().enumerate() {
        let z0_hat = query(predictor, &z, Timestep::Discrete(t), z_y)?;
        let Some(&next) = ts.get(i + 1) else {
            return Ok(z0_hat);
        };
        let eps = match rng.as_mut() {
            Some(r) => LatentTensor::gaussian_from(z.dims, z.channels, r),
            None => z.zeros_like(),
        };
        z = bridge_forward(&z0_hat, z_y, next, &eps, sched)?;
    }
    unreachable!("timestep list is never empty")
}

/// Explicit Euler integration of the predicted velocity from `t = 0` to 1.
pub fn flow_sample(z_src: &LatentTensor, predictor: &dyn Predictor, steps: usize) -> Result<LatentTensor> {
    expect_kind(predictor, PredictionKind::Velocity)?;
    if steps < 1 {
        return Err(Error::Parameter("flow integration needs at least one step".into()));
    }
    let h = 1.0 / steps as f64;
    let mut z = z_src.clone();
    for k in 0..steps {
        let v = query(predictor, &z, Timestep::Continuous(k as f64 * h), z_src)?;
        z = z.axpby(1.0, &v, h)?;
    }
    Ok(z)
}

/// Straight-path training pair `(z_t, v)`.
pub fn flow_matching_target(z_src: &LatentTensor, z_tgt: &LatentTensor, t: f64) -> Result<(LatentTensor, LatentTensor)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Parameter(format!("t must be in [0, 1], got {t}")));
    }
    let zt = z_src.axpby(1.0 - t, z_tgt, t)?;
    let v = z_tgt.axpby(1.0, z_src, -1.0)?;
    Ok((zt, v))
}

/// Analytic predictors that know the answer.
pub mod oracle {
    use super::*;

    /// `ε̂ = (z_t − √ᾱ_t·z0*) / √(1−ᾱ_t)`.
    pub struct NoiseOracle<'a> {
        pub z0: LatentTensor,
        pub schedule: &'a NoiseSchedule,
    }

    impl Predictor for NoiseOracle<'_> {
        fn kind(&self) -> PredictionKind {
            PredictionKind::Noise
        }

        fn predict(&self, z_t: &LatentTensor, t: Timestep, _: &LatentTensor) -> Result<LatentTensor> {
            let Timestep::Discrete(t) = t else {
                return Err(Error::Contract("noise oracle needs a discrete timestep".into()));
            };
            let ab = self.schedule.alpha_bar(t)?;
            let s = (1.0 - ab).sqrt();
            z_t.axpby(1.0 / s, &self.z0, -ab.sqrt() / s)
        }
    }

    /// Always predicts the known clean latent.
    pub struct TargetOracle {
        pub z0: LatentTensor,
    }

    impl Predictor for TargetOracle {
        fn kind(&self) -> PredictionKind {
            PredictionKind::Target
        }

        fn predict(&self, z_t: &LatentTensor, _: Timestep, _: &LatentTensor) -> Result<LatentTensor> {
            if !z_t.same_shape(&self.z0) {
                return Err(Error::Shape("oracle target shape differs from input".into()));
            }
            Ok(self.z0.clone())
        }
    }

    /// Spatially fixed velocity field.
    pub struct ConstantVelocity {
        pub v: LatentTensor,
    }

    impl Predictor for ConstantVelocity {
        fn kind(&self) -> PredictionKind {
            PredictionKind::Velocity
        }

        fn predict(&self, _: &LatentTensor, _: Timestep, _: &LatentTensor) -> Result<LatentTensor> {
            Ok(self.v.clone())
        }
    }

    /// Any predictor kind returning `a·z_t`.
    pub struct Linear {
        pub kind: PredictionKind,
        pub a: f64,
    }

    impl Predictor for Linear {
        fn kind(&self) -> PredictionKind {
            self.kind
        }

        fn predict(&self, z_t: &LatentTensor, _: Timestep, _: &LatentTensor) -> Result<LatentTensor> {
            Ok(z_t.scale(self.a))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;

    fn latent(seed: u64) -> LatentTensor {
        LatentTensor::gaussian([4, 3, 2], 3, seed)
    }

    #[test]
    fn codec_constant_and_block_mean() {
        let c = Patch::filled([96, 96, 96], 0.37);
        let z = toy_encode(&c, LATENT_CHANNELS).unwrap();
        assert_eq!(z.dims, [24, 24, 24]);
        assert_eq!(z.channels, 3);
        assert!(z.data.iter().all(|&v| (v - 0.37f32 as f64).abs() < 1e-12));
        assert_eq!(toy_decode(&z), c);

        let ramp = Patch::new([4, 4, 4], (0..64).map(|i| i as f32).collect()).unwrap();
        let z = toy_encode(&ramp, 1).unwrap();
        assert_eq!(z.data, vec![31.5]);
        assert!(toy_encode(&Patch::filled([6, 4, 4], 0.0), 1).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 1000);
        assert_eq!(s.betas[0], 0.0015);
        assert_eq!(s.betas[999], 0.0205);
        assert_eq!(s.alpha_bars[0], 0.9985);
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bars.windows(2).all(|w| w[0] > w[1]));
        for &ab in &s.alpha_bars {
            assert!((ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2) - 1.0).abs() < 1e-12);
        }
        let one = make_scaled_linear_schedule(0.0015, 0.0205, 1).unwrap();
        assert_eq!(one.betas, vec![0.0015]);
        assert!(make_scaled_linear_schedule(0.02, 0.01, 10).is_err());
    }

    #[test]
    fn ddpm_forward_branches() {
        let s = NoiseSchedule::default();
        let z0 = latent(1);
        let eps = latent(2);
        let t = 417;
        let ab = s.alpha_bars[t];
        assert_eq!(ddpm_forward(&z0, t, &z0.zeros_like(), &s).unwrap(), z0.scale(ab.sqrt()));
        assert_eq!(ddpm_forward(&z0.zeros_like(), t, &eps, &s).unwrap(), eps.scale((1.0 - ab).sqrt()));
        assert!(matches!(ddpm_forward(&z0, 1000, &eps, &s), Err(Error::Index { .. })));
    }

    #[test]
    fn ddpm_forward_variance() {
        let s = NoiseSchedule::default();
        let t = 600;
        let z0 = LatentTensor::filled([100, 100, 10], 1, 0.7);
        let eps = LatentTensor::gaussian([100, 100, 10], 1, 99);
        let zt = ddpm_forward(&z0, t, &eps, &s).unwrap();
        let n = zt.data.len() as f64;
        let mean = zt.data.iter().sum::<f64>() / n;
        let var = zt.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expect = 1.0 - s.alpha_bars[t];
        assert!((var - expect).abs() / expect < 0.02, "{var} vs {expect}");
    }

    #[test]
    fn ddim_oracle_recovers_target() {
        let s = NoiseSchedule::default();
        let z0 = latent(5);
        let cond = latent(6);
        let p = NoiseOracle {
            z0: z0.clone(),
            schedule: &s,
        };
        let out = ddim_sample(&cond, &p, &s, DDIM_STEPS, 11).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-4);
        let one = ddim_sample(&cond, &p, &s, 1, 11).unwrap();
        assert!(one.max_abs_diff(&z0) < 1e-12);
    }

    #[test]
    fn ddim_zero_predictor_matches_scalar_recursion() {
        let s = NoiseSchedule::default();
        let cond = latent(3);
        let p = Linear {
            kind: PredictionKind::Noise,
            a: 0.0,
        };
        let out = ddim_sample(&cond, &p, &s, 50, 4).unwrap();
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts[0], 980);
        assert_eq!(*ts.last().unwrap(), 0);
        let mut expect = LatentTensor::gaussian(cond.dims, cond.channels, 4);
        for (i, &t) in ts.iter().enumerate() {
            let prev = ts.get(i + 1).map_or(1.0, |&tp| s.alpha_bars[tp]);
            for v in &mut expect.data {
                *v = *v / s.alpha_bars[t].sqrt() * prev.sqrt();
            }
        }
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn wrong_predictor_kind_is_rejected() {
        let s = NoiseSchedule::default();
        let b = BridgeSchedule::default();
        let z = latent(1);
        let v = ConstantVelocity { v: z.clone() };
        assert!(matches!(ddim_sample(&z, &v, &s, 50, 0), Err(Error::Contract(_))));
        assert!(matches!(bridge_sample(&z, &v, &b, 10, None), Err(Error::Contract(_))));
        let t = TargetOracle { z0: z.clone() };
        assert!(matches!(flow_sample(&z, &t, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn bridge_schedule_shape() {
        let b = BridgeSchedule::default();
        assert_eq!(b.m[0], 0.001);
        assert_eq!(b.m[999], 0.999);
        assert!(b.sigma2[0] < 2.1e-3 && b.sigma2[999] < 2.1e-3);
        let peak = b.sigma2.iter().cloned().fold(0.0, f64::max);
        let argmax = b.sigma2.iter().position(|&v| v == peak).unwrap();
        assert!((b.m[argmax] - 0.5).abs() < 1e-3);
        let d = b.m[1] - b.m[0];
        assert!(b.m.windows(2).all(|w| ((w[1] - w[0]) - d).abs() < 1e-15));
    }

    #[test]
    fn bridge_forward_cases() {
        let b = make_bridge_schedule(0.0, 1.0, 3).unwrap();
        let z0 = latent(1);
        let zy = latent(2);
        let mid = bridge_forward(&z0, &zy, 1, &z0.zeros_like(), &b).unwrap();
        assert_eq!(b.sigma2[1], 0.5);
        assert!(mid.max_abs_diff(&z0.axpby(0.5, &zy, 0.5).unwrap()) < 1e-15);

        let d = BridgeSchedule::default();
        let first = bridge_forward(&z0, &zy, 0, &z0.zeros_like(), &d).unwrap();
        assert!(first.max_abs_diff(&z0.axpby(0.999, &zy, 0.001).unwrap()) < 1e-15);
        let same = bridge_forward(&z0, &z0, 500, &z0.zeros_like(), &d).unwrap();
        assert!(same.max_abs_diff(&z0) < 1e-15);
        assert!(matches!(
            bridge_forward(&z0, &LatentTensor::filled([1, 1, 1], 3, 0.0), 0, &z0, &d),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bridge_oracle_is_exact() {
        let b = BridgeSchedule::default();
        let z0 = latent(7);
        let zy = latent(8);
        let p = TargetOracle { z0: z0.clone() };
        let out = bridge_sample(&zy, &p, &b, 200, None).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-5);
        let noisy_a = bridge_sample(&zy, &p, &b, 20, Some(3)).unwrap();
        let noisy_b = bridge_sample(&zy, &p, &b, 20, Some(3)).unwrap();
        assert_eq!(noisy_a, noisy_b);
    }

    #[test]
    fn flow_cases() {
        let src = latent(1);
        let tgt = latent(2);
        let v = ConstantVelocity {
            v: tgt.axpby(1.0, &src, -1.0).unwrap(),
        };
        for steps in [1, 7, 64] {
            assert!(flow_sample(&src, &v, steps).unwrap().max_abs_diff(&tgt) < 1e-12);
        }
        let still = Linear {
            kind: PredictionKind::Velocity,
            a: 0.0,
        };
        assert_eq!(flow_sample(&src, &still, 10).unwrap(), src);
        let decay = Linear {
            kind: PredictionKind::Velocity,
            a: -1.0,
        };
        let out = flow_sample(&src, &decay, 100).unwrap();
        let f = (1.0f64 - 0.01).powi(100);
        assert!(out.max_abs_diff(&src.scale(f)) < 1e-6);
        assert!(matches!(flow_sample(&src, &still, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn flow_matching_pairs() {
        let src = latent(1);
        let tgt = latent(2);
        let (z0, v) = flow_matching_target(&src, &tgt, 0.0).unwrap();
        assert_eq!(z0, src);
        let (z1, _) = flow_matching_target(&src, &tgt, 1.0).unwrap();
        assert_eq!(z1, tgt);
        let (zt, v2) = flow_matching_target(&src, &tgt, 0.3).unwrap();
        assert_eq!(v, v2);
        assert!(zt.axpby(1.0, &v, 0.7).unwrap().max_abs_diff(&tgt) < 1e-12);
    }

    #[test]
    fn schedule_csv_has_all_rows() {
        let mut buf = Vec::new();
        NoiseSchedule::default().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1001);
        assert!(text.starts_with("t,beta,alpha_bar\n0,0.0015,0.9985\n"));
    }
}
