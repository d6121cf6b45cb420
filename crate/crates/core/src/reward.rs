//! Toy condition corpus and analytic stand-ins for the quality scorers.
//!
//! Each vocabulary token owns a sinusoid centred on an integer DFT bin, so
//! clean templates have exactly sparse, band-limited spectra. Two MOS-style
//! scorers read different features: [`Scorer::proxy_mos`] compares log
//! magnitude spectra (phase-blind), [`Scorer::eval_mos`] compares time-domain
//! shape and penalizes high-frequency energy.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::waveform::{Condition, Waveform};

pub const CORPUS_VERSION: u32 = 1;
pub const TEMPLATE_PEAK: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct MosScore(f64);

impl MosScore {
    pub fn new(v: f64) -> Self {
        Self(v.clamp(1.0, 5.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTone {
    pub token: usize,
    pub bin: usize,
    pub freq_hz: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub data_len: usize,
    pub sample_rate: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            data_len: 256,
            sample_rate: 8000.0,
            n_train: 192,
            n_val: 32,
            n_test: 32,
            seed: 0,
        }
    }
}

const DEFAULT_BINS: [usize; 8] = [5, 8, 12, 17, 23, 30, 38, 47];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCorpus {
    pub version: u32,
    pub data_len: usize,
    pub sample_rate: f64,
    pub vocabulary: Vec<TokenTone>,
    pub conditions: Vec<Condition>,
    pub split: Split,
}

impl ConditionCorpus {
    pub fn build(cfg: &CorpusConfig) -> Result<Self> {
        if cfg.vocab_size == 0 || cfg.data_len < 4 {
            return Err(Error::InvalidArgument("corpus needs a vocabulary and length >= 4".into()));
        }
        let nyquist = cfg.data_len / 2;
        let vocabulary: Vec<TokenTone> = (0..cfg.vocab_size)
            .map(|k| {
                let bin = if cfg.data_len == 256 && k < DEFAULT_BINS.len() {
                    DEFAULT_BINS[k]
                } else {
                    1 + k * (nyquist / 2).max(1) / cfg.vocab_size.max(1) + k
                };
                TokenTone {
                    token: k,
                    bin,
                    freq_hz: bin as f64 * cfg.sample_rate / cfg.data_len as f64,
                    phase: (2.0 * PI * 0.618_033_988_75 * (k as f64 + 1.0)).rem_euclid(2.0 * PI),
                }
            })
            .collect();
        if vocabulary.iter().any(|v| v.bin == 0 || v.bin >= nyquist / 2) || vocabulary.windows(2).any(|w| w[0].bin >= w[1].bin) {
            return Err(Error::InvalidArgument(
                "vocabulary tones must be distinct and below half Nyquist".into(),
            ));
        }
        let total = cfg.n_train + cfg.n_val + cfg.n_test;
        let available = count_multisets(cfg.vocab_size, Condition::MAX_TOKENS);
        if total > available {
            return Err(Error::InvalidArgument(format!(
                "{total} conditions requested but only {available} distinct token multisets exist"
            )));
        }
        let mut r = rng::rng_for(cfg.seed, &[rng::stream::CORPUS]);
        let mut seen = BTreeSet::new();
        let mut keys = Vec::with_capacity(total);
        while keys.len() < total {
            let n = r.random_range(1..=Condition::MAX_TOKENS);
            let tokens: Vec<usize> = (0..n).map(|_| r.random_range(0..cfg.vocab_size)).collect();
            let mut key = tokens.clone();
            key.sort_unstable();
            if seen.insert(key) {
                keys.push(tokens);
            }
        }
        let conditions: Vec<Condition> = keys.into_iter().enumerate().map(|(id, tokens)| Condition { id, tokens }).collect();
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut r);
        let split = Split {
            train: order[..cfg.n_train].to_vec(),
            val: order[cfg.n_train..cfg.n_train + cfg.n_val].to_vec(),
            test: order[cfg.n_train + cfg.n_val..].to_vec(),
        };
        Ok(Self {
            version: CORPUS_VERSION,
            data_len: cfg.data_len,
            sample_rate: cfg.sample_rate,
            vocabulary,
            conditions,
            split,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn indices(&self, split: SplitName) -> &[usize] {
        match split {
            SplitName::Train => &self.split.train,
            SplitName::Val => &self.split.val,
            SplitName::Test => &self.split.test,
        }
    }

    pub fn conditions_in(&self, split: SplitName) -> Vec<Condition> {
        self.indices(split).iter().map(|&i| self.conditions[i].clone()).collect()
    }

    /// `(condition, clean template)` pairs for a split.
    pub fn items(&self, split: SplitName) -> Result<Vec<(Condition, Waveform)>> {
        self.conditions_in(split)
            .into_iter()
            .map(|c| {
                let w = self.template(&c)?;
                Ok((c, w))
            })
            .collect()
    }

    /// Sum of the condition's token sinusoids scaled to peak [`TEMPLATE_PEAK`].
    pub fn template(&self, c: &Condition) -> Result<Waveform> {
        c.validate(self.vocab_size())?;
        let n = self.data_len as f64;
        let mut x = vec![0.0; self.data_len];
        for &tok in &c.tokens {
            let tone = &self.vocabulary[tok];
            for (i, v) in x.iter_mut().enumerate() {
                *v += (2.0 * PI * tone.bin as f64 * i as f64 / n + tone.phase).sin();
            }
        }
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Waveform::new(x.into_iter().map(|v| v * TEMPLATE_PEAK / peak).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.version != CORPUS_VERSION {
            return Err(Error::VersionMismatch {
                what: "corpus",
                found: c.version,
                expected: CORPUS_VERSION,
            });
        }
        Ok(c)
    }
}

fn count_multisets(vocab: usize, max_len: usize) -> usize {
    // C(vocab + k - 1, k) summed over k = 1..=max_len
    (1..=max_len)
        .map(|k| {
            let mut num = 1u128;
            let mut den = 1u128;
            for i in 0..k {
                num *= (vocab + k - 1 - i) as u128;
                den *= (i + 1) as u128;
            }
            (num / den) as usize
        })
        .sum()
}

/// Frozen scorer constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    /// Weight of the spectral distance in the training scorer.
    pub proxy_weight: f64,
    /// Weight of the normalized time-domain distance in the held-out scorer.
    pub eval_time_weight: f64,
    /// Weight of the high-frequency energy ratio in the held-out scorer.
    pub eval_hf_weight: f64,
    /// Amplitude floor inside the log-magnitude spectrum.
    pub spectral_floor: f64,
    /// Divisor normalizing the mean log-magnitude gap.
    pub spectral_norm: f64,
    /// Bins strictly above this count as high frequency.
    pub hf_cutoff_bin: usize,
    /// Tone amplitude above which a token counts as present.
    pub ter_threshold: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            proxy_weight: 4.0,
            eval_time_weight: 2.0,
            eval_hf_weight: 2.0,
            spectral_floor: 1e-3,
            spectral_norm: 101f64.ln(),
            hf_cutoff_bin: 64,
            ter_threshold: 0.1,
        }
    }
}

pub struct Scorer {
    pub cfg: ScorerConfig,
    corpus: Arc<ConditionCorpus>,
    fft: Arc<dyn Fft<f64>>,
}

impl Scorer {
    pub fn new(corpus: Arc<ConditionCorpus>, cfg: ScorerConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(corpus.data_len);
        Self { cfg, corpus, fft }
    }

    pub fn corpus(&self) -> &ConditionCorpus {
        &self.corpus
    }

    /// One-sided amplitude spectrum `2 |X_k| / N` for `k = 0..=N/2`.
    pub fn amplitude_spectrum(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        buf[..=n / 2].iter().map(|c| 2.0 * c.norm() / n as f64).collect()
    }

    /// Mean absolute log-magnitude gap, divided by `spectral_norm`.
    pub fn spectral_distance(&self, x: &Waveform, reference: &Waveform) -> f64 {
        let f = self.cfg.spectral_floor;
        let a = self.amplitude_spectrum(x.samples());
        let b = self.amplitude_spectrum(reference.samples());
        let gap: f64 = a.iter().zip(&b).map(|(p, q)| ((p + f).ln() - (q + f).ln()).abs()).sum();
        gap / a.len() as f64 / self.cfg.spectral_norm
    }

    /// `||x - ref|| / ||ref||`.
    pub fn time_distance(&self, x: &Waveform, reference: &Waveform) -> f64 {
        let num: f64 = x.samples().iter().zip(reference.samples()).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = reference.samples().iter().map(|v| v * v).sum();
        (num / den).sqrt()
    }

    /// Fraction of spectral energy above `hf_cutoff_bin`.
    pub fn hf_ratio(&self, x: &Waveform) -> f64 {
        let a = self.amplitude_spectrum(x.samples());
        let total: f64 = a.iter().map(|v| v * v).sum();
        if total == 0.0 {
            return 0.0;
        }
        a.iter().skip(self.cfg.hf_cutoff_bin + 1).map(|v| v * v).sum::<f64>() / total
    }

    /// Training reward: `clamp(5 - w * D_spectral, 1, 5)`.
    pub fn proxy_mos(&self, x0: &Waveform, c: &Condition) -> Result<MosScore> {
        let t = self.corpus.template(c)?;
        x0.check_len(t.len())?;
        Ok(MosScore::new(5.0 - self.cfg.proxy_weight * self.spectral_distance(x0, &t)))
    }

    /// Held-out evaluator: `clamp(5 - w_t * D_time - w_hf * HF, 1, 5)`.
    pub fn eval_mos(&self, x0: &Waveform, c: &Condition) -> Result<MosScore> {
        let t = self.corpus.template(c)?;
        x0.check_len(t.len())?;
        Ok(MosScore::new(
            5.0 - self.cfg.eval_time_weight * self.time_distance(x0, &t) - self.cfg.eval_hf_weight * self.hf_ratio(x0),
        ))
    }

    /// Tokens whose tone amplitude exceeds `threshold`, ascending.
    pub fn detect_tokens(&self, x0: &Waveform, threshold: f64) -> Vec<usize> {
        let a = self.amplitude_spectrum(x0.samples());
        self.corpus
            .vocabulary
            .iter()
            .filter(|tone| a[tone.bin] > threshold)
            .map(|tone| tone.token)
            .collect()
    }

    /// Edit distance between detected and expected token sets over `|c|`, capped at 1.
    pub fn token_error_rate_at(&self, x0: &Waveform, c: &Condition, threshold: f64) -> Result<f64> {
        c.validate(self.corpus.vocab_size())?;
        x0.check_len(self.corpus.data_len)?;
        let detected = self.detect_tokens(x0, threshold);
        let expected: Vec<usize> = c.tokens.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        Ok((edit_distance(&detected, &expected) as f64 / expected.len() as f64).min(1.0))
    }

    pub fn token_error_rate(&self, x0: &Waveform, c: &Condition) -> Result<f64> {
        self.token_error_rate_at(x0, c, self.cfg.ter_threshold)
    }
}

pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}
