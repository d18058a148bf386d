//! Vector-quantized bottleneck that defines the discrete goal space.
//!
//! Observations are encoded, snapped to the nearest of `k` codebook vectors
//! and decoded. The encoder and decoder train by gradient descent on the
//! reconstruction and commitment losses with a straight-through gradient; the
//! codebook itself only moves through exponential moving averages of the
//! latents assigned to each code.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CqmError, Result};
use crate::exec::Execution;
use crate::graph::{Landmark, LandmarkSource};
use crate::mlp::Mlp;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    embeddings: Vec<Vec<f64>>,
    ema_count: Vec<f64>,
    ema_sum: Vec<Vec<f64>>,
    usage_age: Vec<u32>,
}

impl Codebook {
    /// One code per initial point, with accumulators `N = 1`, `m = e`.
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(CqmError::Config(format!("codebook needs at least 2 codes, got {}", points.len())));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
            return Err(CqmError::Config("codebook points must be finite and share one dimension".into()));
        }
        let k = points.len();
        Ok(Codebook {
            ema_sum: points.clone(),
            embeddings: points,
            ema_count: vec![1.0; k],
            usage_age: vec![0; k],
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i]
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn ema_count(&self) -> &[f64] {
        &self.ema_count
    }

    pub fn ema_sum(&self, i: usize) -> &[f64] {
        &self.ema_sum[i]
    }

    pub fn usage_age(&self) -> &[u32] {
        &self.usage_age
    }

    /// Nearest code under L2 and its squared distance; ties go to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, e) in self.embeddings.iter().enumerate() {
            let d = sq_dist(z, e);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn nearest_batch(&self, zs: &[Vec<f64>], exec: Execution) -> Vec<(usize, f64)> {
        exec.map(zs, |z| self.nearest(z))
    }

    /// Counts a finished rollout towards every code's age.
    pub fn tick_rollout(&mut self) {
        for a in &mut self.usage_age {
            *a = a.saturating_add(1);
        }
    }

    /// `N <- d N + (1-d) n`, `m <- d m + (1-d) sum`, `e <- m / max(N, eps)`.
    pub fn ema_update(&mut self, latents: &[Vec<f64>], assignment: &[usize], decay: f64, eps_den: f64) {
        let k = self.len();
        let dim = self.dim();
        let mut counts = vec![0.0; k];
        let mut sums = vec![vec![0.0; dim]; k];
        for (z, &c) in latents.iter().zip(assignment) {
            counts[c] += 1.0;
            for (s, v) in sums[c].iter_mut().zip(z) {
                *s += v;
            }
        }
        for i in 0..k {
            self.ema_count[i] = decay * self.ema_count[i] + (1.0 - decay) * counts[i];
            let denom = self.ema_count[i].max(eps_den);
            for d in 0..dim {
                self.ema_sum[i][d] = decay * self.ema_sum[i][d] + (1.0 - decay) * sums[i][d];
                self.embeddings[i][d] = self.ema_sum[i][d] / denom;
            }
            if counts[i] > 0.0 {
                self.usage_age[i] = 0;
            }
        }
    }

    pub fn inactive(&self, max_age: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.usage_age[i] > max_age).collect()
    }

    /// Squared distance of each candidate to its nearest code.
    pub fn resample_weights(&self, candidates: &[Vec<f64>]) -> Vec<f64> {
        candidates.iter().map(|z| self.nearest(z).1).collect()
    }

    /// Re-initializes each code in `dead` to a candidate drawn with
    /// probability proportional to its squared distance from the nearest
    /// code. Weights shrink after every placement so consecutive dead codes
    /// spread out. Returns the number of codes reset.
    pub fn resample<R: Rng + ?Sized>(&mut self, dead: &[usize], candidates: &[Vec<f64>], rng: &mut R) -> usize {
        if candidates.is_empty() || dead.is_empty() {
            return 0;
        }
        let mut weights = self.resample_weights(candidates);
        for &code in dead {
            let total: f64 = weights.iter().sum();
            let pick = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if target < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            } else {
                rng.random_range(0..candidates.len())
            };
            let z = candidates[pick].clone();
            for (w, c) in weights.iter_mut().zip(candidates) {
                *w = w.min(sq_dist(c, &z));
            }
            self.ema_count[code] = 1.0;
            self.ema_sum[code] = z.clone();
            self.embeddings[code] = z;
            self.usage_age[code] = 0;
        }
        dead.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Coder {
    Identity,
    Mlp(Mlp),
}

impl Coder {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Coder::Identity => x.to_vec(),
            Coder::Mlp(m) => m.forward(x),
        }
    }

    pub fn mlp(&self) -> Option<&Mlp> {
        match self {
            Coder::Identity => None,
            Coder::Mlp(m) => Some(m),
        }
    }

    pub fn mlp_mut(&mut self) -> Option<&mut Mlp> {
        match self {
            Coder::Identity => None,
            Coder::Mlp(m) => Some(m),
        }
    }

    fn num_params(&self) -> usize {
        self.mlp().map_or(0, Mlp::num_params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub lambda_commit: f64,
    pub ema_decay: f64,
    pub eps_den: f64,
    pub learning_rate: f64,
    /// Skips EMA codebook updates (used for diagnostics).
    pub freeze_codebook: bool,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig { lambda_commit: 0.25, ema_decay: 0.99, eps_den: 1e-5, learning_rate: 0.05, freeze_codebook: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLossReport {
    pub recon: f64,
    pub commit: f64,
    pub lambda_commit: f64,
}

/// Straight-through gradients of one batch, without applying them.
#[derive(Debug, Clone)]
pub struct VqGradients {
    pub report: VqLossReport,
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    pub latents: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub encoder: Coder,
    pub decoder: Coder,
    pub codebook: Codebook,
    pub config: QuantizerConfig,
}

impl Quantizer {
    pub fn identity(codebook: Codebook, config: QuantizerConfig) -> Self {
        Quantizer { encoder: Coder::Identity, decoder: Coder::Identity, codebook, config }
    }

    /// MLP encoder/decoder; the codebook is seeded with encodings of `init_obs`.
    pub fn mlp<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: usize,
        latent: usize,
        init_obs: &[Vec<f64>],
        config: QuantizerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let enc = Mlp::new(obs_dim, hidden, latent, rng);
        let dec = Mlp::new(latent, hidden, obs_dim, rng);
        let codes = init_obs.iter().map(|o| enc.forward(o)).collect();
        Ok(Quantizer { encoder: Coder::Mlp(enc), decoder: Coder::Mlp(dec), codebook: Codebook::from_points(codes)?, config })
    }

    pub fn encode(&self, raw: &[f64]) -> Vec<f64> {
        self.encoder.apply(raw)
    }

    pub fn decode(&self, latent: &[f64]) -> Vec<f64> {
        self.decoder.apply(latent)
    }

    /// Nearest code index and its embedding.
    pub fn quantize(&self, latent: &[f64]) -> (usize, Vec<f64>) {
        let (c, _) = self.codebook.nearest(latent);
        (c, self.codebook.embedding(c).to_vec())
    }

    /// Code of each observation.
    pub fn assign(&self, raw: &[Vec<f64>], exec: Execution) -> Vec<usize> {
        exec.map(raw, |o| self.codebook.nearest(&self.encode(o)).0)
    }

    pub fn gradients(&self, batch: &[Vec<f64>], exec: Execution) -> Result<VqGradients> {
        if batch.is_empty() {
            return Err(CqmError::EmptyBuffer);
        }
        let b = batch.len() as f64;
        let obs_dim = batch[0].len() as f64;
        let lat_dim = self.codebook.dim() as f64;
        let lambda = self.config.lambda_commit;
        let n_enc = self.encoder.num_params();
        let n_dec = self.decoder.num_params();

        struct Sample {
            z_e: Vec<f64>,
            code: usize,
            recon: f64,
            commit: f64,
            g_enc: Vec<f64>,
            g_dec: Vec<f64>,
        }
        let samples: Vec<Sample> = exec.map(batch, |o| {
            let (enc_h, z_e) = match &self.encoder {
                Coder::Identity => (Vec::new(), o.clone()),
                Coder::Mlp(m) => m.forward_cached(o),
            };
            let (code, commit_sq) = self.codebook.nearest(&z_e);
            let z_q = self.codebook.embedding(code);
            let (dec_h, recon_out) = match &self.decoder {
                Coder::Identity => (Vec::new(), z_q.to_vec()),
                Coder::Mlp(m) => m.forward_cached(z_q),
            };
            let diff: Vec<f64> = recon_out.iter().zip(o).map(|(r, x)| r - x).collect();
            let recon = diff.iter().map(|d| d * d).sum::<f64>();
            let g_out: Vec<f64> = diff.iter().map(|d| 2.0 * d / (b * obs_dim)).collect();
            let mut g_dec = vec![0.0; n_dec];
            // straight-through: dL/dz_q is handed to z_e unchanged
            let g_zq = match &self.decoder {
                Coder::Identity => g_out,
                Coder::Mlp(m) => m.backward(z_q, &dec_h, &g_out, &mut g_dec),
            };
            let mut g_enc = vec![0.0; n_enc];
            if let Coder::Mlp(m) = &self.encoder {
                let g_ze: Vec<f64> = g_zq
                    .iter()
                    .zip(z_e.iter().zip(z_q))
                    .map(|(g, (ze, zq))| g + lambda * 2.0 * (ze - zq) / (b * lat_dim))
                    .collect();
                m.backward(o, &enc_h, &g_ze, &mut g_enc);
            }
            Sample { z_e, code, recon, commit: commit_sq, g_enc, g_dec }
        });

        let mut encoder = vec![0.0; n_enc];
        let mut decoder = vec![0.0; n_dec];
        let (mut recon, mut commit) = (0.0, 0.0);
        let mut latents = Vec::with_capacity(samples.len());
        let mut assignment = Vec::with_capacity(samples.len());
        for s in samples {
            recon += s.recon;
            commit += s.commit;
            for (a, g) in encoder.iter_mut().zip(&s.g_enc) {
                *a += g;
            }
            for (a, g) in decoder.iter_mut().zip(&s.g_dec) {
                *a += g;
            }
            latents.push(s.z_e);
            assignment.push(s.code);
        }
        let report = VqLossReport { recon: recon / (b * obs_dim), commit: commit / (b * lat_dim), lambda_commit: lambda };
        if !(report.recon.is_finite() && report.commit.is_finite())
            || encoder.iter().chain(&decoder).any(|g| !g.is_finite())
        {
            return Err(CqmError::NonFinite {
                stage: "quantizer training",
                detail: format!("recon={} commit={}", report.recon, report.commit),
            });
        }
        Ok(VqGradients { report, encoder, decoder, latents, assignment })
    }

    /// One gradient step on the encoder/decoder followed by the EMA codebook update.
    pub fn train_step(&mut self, batch: &[Vec<f64>], exec: Execution) -> Result<VqLossReport> {
        let g = self.gradients(batch, exec)?;
        let lr = self.config.learning_rate;
        if let Some(m) = self.encoder.mlp_mut() {
            m.sgd_step(&g.encoder, lr);
        }
        if let Some(m) = self.decoder.mlp_mut() {
            m.sgd_step(&g.decoder, lr);
        }
        if !self.config.freeze_codebook {
            self.codebook.ema_update(&g.latents, &g.assignment, self.config.ema_decay, self.config.eps_den);
        }
        Ok(g.report)
    }

    /// Resets codes unused for more than `max_age` rollouts; see [`Codebook::resample`].
    pub fn resample_dead_codes<R: Rng + ?Sized>(&mut self, recent: &[Vec<f64>], max_age: u32, rng: &mut R) -> usize {
        if recent.is_empty() {
            return 0;
        }
        let dead = self.codebook.inactive(max_age);
        if dead.is_empty() {
            return 0;
        }
        let latents: Vec<Vec<f64>> = recent.iter().map(|o| self.encode(o)).collect();
        self.codebook.resample(&dead, &latents, rng)
    }

    /// `psi(e_j)` for every code.
    pub fn decode_landmarks(&self) -> Vec<Landmark> {
        self.codebook
            .embeddings()
            .iter()
            .enumerate()
            .map(|(j, e)| Landmark { id: j, point: self.decode(e), latent: e.clone(), source: LandmarkSource::Code(j) })
            .collect()
    }

    /// Number of buffered observations assigned to each code.
    pub fn assignment_counts(&self, raw: &[Vec<f64>], exec: Execution) -> Vec<usize> {
        let mut counts = vec![0; self.codebook.len()];
        for c in self.assign(raw, exec) {
            counts[c] += 1;
        }
        counts
    }

    /// Decoded landmarks of the codes that at least one observation maps to.
    pub fn decode_assigned_landmarks(&self, raw: &[Vec<f64>], exec: Execution) -> Vec<Landmark> {
        let counts = self.assignment_counts(raw, exec);
        let mut out: Vec<Landmark> =
            self.decode_landmarks().into_iter().filter(|l| matches!(l.source, LandmarkSource::Code(c) if counts[c] > 0)).collect();
        for (i, l) in out.iter_mut().enumerate() {
            l.id = i;
        }
        out
    }

    /// One landmark per code with at least one assigned observation: the
    /// decoded pass-through, or a uniformly chosen raw member when
    /// `raw_representative` is set.
    pub fn landmarks_from_buffer<R: Rng + ?Sized>(
        &self,
        raw: &[Vec<f64>],
        raw_representative: bool,
        rng: &mut R,
        exec: Execution,
    ) -> Result<Vec<Landmark>> {
        if raw.is_empty() {
            return Err(CqmError::EmptyBuffer);
        }
        let assign = self.assign(raw, exec);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); self.codebook.len()];
        for (i, &c) in assign.iter().enumerate() {
            members[c].push(i);
        }
        let mut out = Vec::new();
        for (c, m) in members.iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            let e = self.codebook.embedding(c);
            let point = if raw_representative { raw[m[rng.random_range(0..m.len())]].clone() } else { self.decode(e) };
            out.push(Landmark { id: out.len(), point, latent: e.to_vec(), source: LandmarkSource::Code(c) });
        }
        Ok(out)
    }

    pub fn active_codes(&self, max_age: u32) -> usize {
        self.codebook.usage_age().iter().filter(|&&a| a <= max_age).count()
    }
}
