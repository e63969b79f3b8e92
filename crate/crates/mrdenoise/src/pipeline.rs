//! Filter chains expressed as token strings.
//!
//! Tokens: `d` runs the eigen-shrinkage patch filter on the current
//! estimate, `g` replaces the current estimate by its Rician-corrected
//! intensities, `p` re-filters the ORIGINAL noisy volume with the current
//! estimate as the non-local-means guide, and `c` (first token only) swaps in
//! a surrogate guide built from the ground truth plus Gaussian noise. The
//! flagship chain is `dgpd`.
//!
//! A sweep evaluates many chains at once and caches shared prefixes, so
//! `d`, `dg`, `dgp`, `dgpd` cost one `d` pass, not four. Stage randomness is
//! keyed by (root seed, stage index) alone, which keeps cached prefixes
//! bit-identical to standalone runs.

use std::collections::HashMap;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::nlpca::{self, NlpcaParams};
use crate::noise::{
    estimate_background_median, estimate_mad_wavelet, rician_correct_image, NoiseMap, RicianLut,
};
use crate::prinlm::{self, PrinlmParams};
use crate::volume::Volume3D;

/// Default surrogate quality: RMSE as a fraction of the intensity peak.
pub const SURROGATE_RMSE_FRACTION: f64 = 0.015;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "sigma", rename_all = "lowercase")]
pub enum NoiseSource {
    /// Rayleigh background median (formula-of-choice for simulations with a
    /// visible zero background).
    Background,
    /// Wavelet MAD (clinical-style volumes without background).
    Mad,
    /// Per-voxel map from the most recent `d` stage.
    Nlpca,
    /// Known constant sigma_g.
    Exact(f64),
}

impl FromStr for NoiseSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "background" => Ok(NoiseSource::Background),
            "mad" => Ok(NoiseSource::Mad),
            "nlpca" => Ok(NoiseSource::Nlpca),
            _ => {
                if let Some(v) = s.strip_prefix("exact:") {
                    let sigma: f64 = v
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad sigma in '{s}'")))?;
                    if !(sigma >= 0.0) {
                        return Err(Error::invalid("exact sigma must be >= 0"));
                    }
                    Ok(NoiseSource::Exact(sigma))
                } else {
                    Err(Error::invalid(format!(
                        "unknown noise source '{s}' (background|mad|nlpca|exact:SIGMA)"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Token {
    C,
    D,
    G,
    P,
}

impl Token {
    pub fn letter(self) -> char {
        match self {
            Token::C => 'c',
            Token::D => 'd',
            Token::G => 'g',
            Token::P => 'p',
        }
    }

    /// Tokens that leave a usable estimate behind.
    fn denoises(self) -> bool {
        matches!(self, Token::C | Token::D | Token::P)
    }
}

/// One pipeline stage; per-stage parameter overrides are optional and fall
/// back to the module defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub token: Token,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nlpca: Option<NlpcaParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prinlm: Option<PrinlmParams>,
    /// Surrogate RMSE in intensity units; defaults to 1.5% of the peak.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_rmse: Option<f64>,
}

impl StageSpec {
    pub fn plain(token: Token) -> Self {
        StageSpec {
            token,
            nlpca: None,
            prinlm: None,
            surrogate_rmse: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub stages: Vec<StageSpec>,
    pub noise_source: NoiseSource,
}

impl PipelineSpec {
    /// Parse a compact token string such as `"dgpd"`.
    pub fn parse(tokens: &str, noise_source: NoiseSource) -> Result<Self> {
        let stages = tokens
            .chars()
            .map(|ch| match ch {
                'c' => Ok(StageSpec::plain(Token::C)),
                'd' => Ok(StageSpec::plain(Token::D)),
                'g' => Ok(StageSpec::plain(Token::G)),
                'p' => Ok(StageSpec::plain(Token::P)),
                _ => Err(Error::invalid(format!(
                    "unknown pipeline token '{ch}' in '{tokens}'"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = PipelineSpec {
            stages,
            noise_source,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PipelineSpec = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("bad pipeline JSON: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn token_string(&self) -> String {
        self.stages.iter().map(|s| s.token.letter()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("pipeline has no stages"));
        }
        let mut have_estimate = false;
        let mut have_d = false;
        for (i, stage) in self.stages.iter().enumerate() {
            match stage.token {
                Token::C => {
                    if i != 0 {
                        return Err(Error::invalid(
                            "'c' (surrogate) may appear only as the first token",
                        ));
                    }
                }
                Token::G => {
                    if !have_estimate {
                        return Err(Error::invalid(
                            "'g' needs a preceding denoising token (c, d or p)",
                        ));
                    }
                    if self.noise_source == NoiseSource::Nlpca && !have_d {
                        return Err(Error::invalid(
                            "noise source 'nlpca' needs a 'd' stage before 'g'",
                        ));
                    }
                }
                Token::P => {
                    if i == 0 {
                        return Err(Error::invalid("'p' needs a prior token as its guide"));
                    }
                    if self.noise_source == NoiseSource::Nlpca && !have_d {
                        return Err(Error::invalid(
                            "noise source 'nlpca' needs a 'd' stage before 'p'",
                        ));
                    }
                }
                Token::D => have_d = true,
            }
            if let Some(p) = &stage.nlpca {
                p.validate()?;
            }
            if let Some(p) = &stage.prinlm {
                p.validate()?;
            }
            have_estimate |= stage.token.denoises();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    /// "1:d", "2:g", ... — position and token.
    pub label: String,
    /// Mean sigma_g consumed (g, p) or produced (d) by the stage.
    pub sigma_mean: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn final_psnr(&self) -> Option<f64> {
        self.stages.last().and_then(|s| s.psnr)
    }

    pub fn final_ssim(&self) -> Option<f64> {
        self.stages.last().and_then(|s| s.ssim)
    }
}

/// Ground truth plus zero-mean Gaussian noise of standard deviation
/// `target_rmse`. No clamping: negative excursions are kept so the empirical
/// RMSE matches the target.
pub fn build_surrogate(truth: &Volume3D, target_rmse: f64, seed: u64) -> Result<Volume3D> {
    if !(target_rmse >= 0.0) {
        return Err(Error::invalid("target_rmse must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = truth
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + target_rmse * n
        })
        .collect();
    truth.like(data)
}

/// Stage RNG seeds derive from the root seed and the stage position only, so
/// a shared prefix is bit-identical however the chain continues.
fn stage_seed(root: u64, stage_index: usize) -> u64 {
    root.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stage_index as u64)
}

struct PipelineState {
    current: Volume3D,
    nlpca_map: Option<NoiseMap>,
    reports: Vec<StageReport>,
}

struct Runner<'a> {
    noisy: &'a Volume3D,
    truth: Option<&'a Volume3D>,
    seed: u64,
    /// Constant sigma estimated once from the noisy input (None until a
    /// stage needs it, or when the source is nlpca).
    base_sigma: Option<f64>,
    lut: RicianLut,
}

impl<'a> Runner<'a> {
    fn new(noisy: &'a Volume3D, truth: Option<&'a Volume3D>, seed: u64) -> Self {
        Runner {
            noisy,
            truth,
            seed,
            base_sigma: None,
            lut: RicianLut::standard(),
        }
    }

    fn sigma_map(&mut self, source: NoiseSource, state: &PipelineState) -> Result<NoiseMap> {
        match source {
            NoiseSource::Nlpca => state.nlpca_map.clone().ok_or_else(|| {
                Error::invalid("noise source 'nlpca' used before any 'd' stage")
            }),
            NoiseSource::Exact(s) => NoiseMap::constant(self.noisy.dims(), s),
            NoiseSource::Background | NoiseSource::Mad => {
                if self.base_sigma.is_none() {
                    let s = match source {
                        NoiseSource::Background => estimate_background_median(self.noisy, None)?,
                        _ => estimate_mad_wavelet(self.noisy)?,
                    };
                    self.base_sigma = Some(s);
                }
                NoiseMap::constant(self.noisy.dims(), self.base_sigma.unwrap())
            }
        }
    }

    fn metrics_for(&self, vol: &Volume3D) -> (Option<f64>, Option<f64>) {
        match self.truth {
            Some(t) => match metrics::roi_mask(t)
                .and_then(|mask| metrics::evaluate(vol, t, &mask))
            {
                Ok(r) => (Some(r.psnr), Some(r.ssim)),
                Err(_) => (None, None),
            },
            None => (None, None),
        }
    }

    fn apply_stage(
        &mut self,
        state: &mut PipelineState,
        stage: &StageSpec,
        stage_index: usize,
        source: NoiseSource,
    ) -> Result<()> {
        let started = Instant::now();
        let mut sigma_mean = None;
        match stage.token {
            Token::C => {
                let truth = self
                    .truth
                    .ok_or_else(|| Error::invalid("'c' stage needs the ground truth volume"))?;
                let rmse = stage
                    .surrogate_rmse
                    .unwrap_or(SURROGATE_RMSE_FRACTION * truth.intensity_peak());
                state.current =
                    build_surrogate(truth, rmse, stage_seed(self.seed, stage_index))?;
            }
            Token::D => {
                let params = stage.nlpca.unwrap_or_default();
                let (out, map) = nlpca::denoise(&state.current, &params)?;
                sigma_mean = Some(map.mean_sigma());
                state.current = out;
                state.nlpca_map = Some(map);
            }
            Token::G => {
                let map = self.sigma_map(source, state)?;
                sigma_mean = Some(map.mean_sigma());
                state.current = rician_correct_image(&state.current, &map, &self.lut)?;
            }
            Token::P => {
                let params = stage.prinlm.unwrap_or_default();
                let map = self.sigma_map(source, state)?;
                sigma_mean = Some(map.mean_sigma());
                state.current = prinlm::denoise(self.noisy, &state.current, &map, &params)?;
            }
        }
        let (psnr, ssim) = self.metrics_for(&state.current);
        state.reports.push(StageReport {
            label: format!("{}:{}", stage_index + 1, stage.token.letter()),
            sigma_mean,
            psnr,
            ssim,
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(())
    }
}

/// Run one pipeline. `truth` enables per-stage quality metrics and is
/// required by the 'c' token. All randomness is derived from `seed`.
pub fn run(
    noisy: &Volume3D,
    spec: &PipelineSpec,
    truth: Option<&Volume3D>,
    seed: u64,
) -> Result<(Volume3D, PipelineReport)> {
    let mut results = run_sweep(noisy, std::slice::from_ref(spec), truth, seed)?;
    Ok(results.pop().expect("one spec in, one result out"))
}

/// Run several pipelines, computing each distinct stage prefix once.
pub fn run_sweep(
    noisy: &Volume3D,
    specs: &[PipelineSpec],
    truth: Option<&Volume3D>,
    seed: u64,
) -> Result<Vec<(Volume3D, PipelineReport)>> {
    for spec in specs {
        spec.validate()?;
    }
    let mut runner = Runner::new(noisy, truth, seed);
    // prefix cache: serialized (noise_source, stages[0..=i]) -> state
    let mut cache: HashMap<String, PipelineState> = HashMap::new();
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut state = PipelineState {
            current: noisy.clone(),
            nlpca_map: None,
            reports: Vec::new(),
        };
        let mut resume_from = 0usize;
        let mut best_key: Option<String> = None;
        for i in (1..=spec.stages.len()).rev() {
            let key = prefix_key(spec, i);
            if cache.contains_key(&key) {
                resume_from = i;
                best_key = Some(key);
                break;
            }
        }
        if let Some(key) = best_key {
            let hit = cache.get(&key).expect("checked above");
            state = PipelineState {
                current: hit.current.clone(),
                nlpca_map: hit.nlpca_map.clone(),
                reports: hit.reports.clone(),
            };
        }
        for (i, stage) in spec.stages.iter().enumerate().skip(resume_from) {
            runner.apply_stage(&mut state, stage, i, spec.noise_source)?;
            let key = prefix_key(spec, i + 1);
            cache.insert(
                key,
                PipelineState {
                    current: state.current.clone(),
                    nlpca_map: state.nlpca_map.clone(),
                    reports: state.reports.clone(),
                },
            );
        }
        out.push((
            state.current,
            PipelineReport {
                stages: state.reports,
            },
        ));
    }
    Ok(out)
}

fn prefix_key(spec: &PipelineSpec, len: usize) -> String {
    let prefix = PipelineSpec {
        stages: spec.stages[..len].to_vec(),
        noise_source: spec.noise_source,
    };
    serde_json::to_string(&prefix).expect("spec serializes")
}

/// PRI-NLM guided by an externally prefiltered volume, then exactly one
/// eigen-shrinkage pass on the result.
pub fn pd_tool(
    noisy: &Volume3D,
    guide: &Volume3D,
    sigma: &NoiseMap,
    prinlm_params: &PrinlmParams,
    nlpca_params: &NlpcaParams,
) -> Result<Volume3D> {
    let refiltered = prinlm::denoise(noisy, guide, sigma, prinlm_params)?;
    Ok(nlpca::denoise(&refiltered, nlpca_params)?.0)
}

/// The flagship chain: eigen-shrink, Rician-correct, guide a non-local-means
/// re-filter of the original data, and post-filter once (token string
/// `dgpd`).
pub fn pca_pri_pcar(
    noisy: &Volume3D,
    noise_source: NoiseSource,
    seed: u64,
) -> Result<(Volume3D, PipelineReport)> {
    let spec = PipelineSpec::parse("dgpd", noise_source)?;
    run(noisy, &spec, None, seed)
}
