use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::{Budget, RunConfig};
use super::model::ModelBundle;
use crate::allocator::{adapt_per_image, AdaptReport, Agent, AllocationEnv, Codec, CodecArtifact, CodecEnv, Outcome};
use crate::codec::{deserialize, Bitstream, StepLadder};
use crate::diffusion::{reconstruct, SamplerConfig, VarianceSchedule};
use crate::error::{Error, Result};
use crate::imaging::{load_image, write_atomic, ImagePlane};
use crate::metrics::{MetricReport, MetricSuite};

pub const SIDECAR_SUFFIX: &str = ".meta.toml";

/// Allocation mode: one level everywhere (`uniform-k`, 1-based) or per-image PPO.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// 0-based action index.
    Uniform(usize),
    Ppo,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ppo" || s == "pcdc" {
            return Ok(Mode::Ppo);
        }
        s.strip_prefix("uniform-")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .map(|k| Mode::Uniform(k - 1))
            .ok_or_else(|| Error::InvalidArgument(format!("mode `{s}`: expected `ppo` or `uniform-<k>`")))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Uniform(a) => write!(f, "uniform-{}", a + 1),
            Mode::Ppo => f.write_str("pcdc"),
        }
    }
}

/// Provenance written next to every output file.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Sidecar {
    pub tool: String,
    pub command: String,
    pub checkpoint_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_bits: Option<f64>,
    pub config: RunConfig,
}

impl Sidecar {
    pub fn new(command: &str, session: &Session) -> Self {
        Self {
            tool: format!("pcdc {}", env!("CARGO_PKG_VERSION")),
            command: command.into(),
            checkpoint_hash: session.model_hash.clone(),
            seed: session.config.seed,
            mode: None,
            budget_bits: None,
            config: session.config.clone(),
        }
    }

    pub fn path_for(output: &Path) -> PathBuf {
        let mut p = output.as_os_str().to_owned();
        p.push(SIDECAR_SUFFIX);
        PathBuf::from(p)
    }

    pub fn write(&self, output: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&Self::path_for(output), text.as_bytes())
    }

    /// `None` when the output has no sidecar.
    pub fn read(output: &Path) -> Result<Option<Self>> {
        let path = Self::path_for(output);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        toml::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug)]
pub struct Compressed {
    pub mode: Mode,
    pub actions: Vec<usize>,
    pub bitstream: Bitstream,
    pub budget_bits: Option<f64>,
    /// Upper bound on the all-coarsest stream size.
    pub minimum_bits: f64,
    pub adaptation: Option<AdaptReport>,
    /// Decoded reconstruction and metrics, when the mode already decoded it.
    pub artifact: Option<CodecArtifact>,
}

impl Compressed {
    pub fn feasible(&self) -> bool {
        self.budget_bits.is_none_or(|b| self.bitstream.total_bits() <= b)
    }
}

/// Trained models plus everything derived from a [`RunConfig`].
pub struct Session {
    pub config: RunConfig,
    pub bundle: ModelBundle,
    pub model_hash: String,
    ladder: StepLadder,
    schedule: VarianceSchedule,
    metrics: MetricSuite,
}

impl Session {
    pub fn new(config: RunConfig, bundle: ModelBundle) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            ladder: config.ladder()?,
            schedule: config.schedule()?,
            metrics: MetricSuite::new(config.weights),
            model_hash: bundle.content_hash(),
            config,
            bundle,
        })
    }

    /// Loads the checkpoint from `paths.checkpoint_dir`.
    pub fn open(config: RunConfig) -> Result<Self> {
        let bundle = ModelBundle::load(&config.paths.checkpoint_dir)?;
        Self::new(config, bundle)
    }

    pub fn ladder(&self) -> &StepLadder {
        &self.ladder
    }

    pub fn metrics(&self) -> &MetricSuite {
        &self.metrics
    }

    pub fn codec(&self) -> Codec<'_> {
        Codec {
            encoder: &self.bundle.encoder,
            model: &self.bundle.entropy,
            ladder: &self.ladder,
            denoiser: &self.bundle.denoiser,
            schedule: &self.schedule,
            sampler: self.config.sampler,
            metrics: &self.metrics,
            block_size: self.config.block_size,
        }
    }

    pub fn agent(&self) -> Agent {
        Agent::new(self.config.num_actions, &self.config.ppo, self.config.seed)
    }

    pub fn budget_bits(&self, image: &ImagePlane, budget: Option<Budget>) -> Result<Option<f64>> {
        budget
            .or(self.config.budget)
            .map(|b| b.bits_for(image.pixels()))
            .transpose()
    }

    /// Compress one image. PPO mode needs a budget and adapts `agent` in place.
    pub fn compress(
        &self,
        image: &ImagePlane,
        mode: Mode,
        budget_bits: Option<f64>,
        agent: &mut Agent,
        seed: u64,
    ) -> Result<Compressed> {
        let codec = self.codec();
        let env = CodecEnv::new(&codec, image, budget_bits.unwrap_or(f64::MAX))?;
        if budget_bits.is_some() {
            env.check_feasible()?;
        }
        let minimum_bits = env.minimum_bits();
        match mode {
            Mode::Uniform(a) => {
                if a >= self.ladder.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{mode} exceeds K = {}",
                        self.ladder.len()
                    )));
                }
                let actions = vec![a; env.num_blocks()];
                Ok(Compressed {
                    mode,
                    bitstream: env.encode(&actions)?,
                    actions,
                    budget_bits,
                    minimum_bits,
                    adaptation: None,
                    artifact: None,
                })
            }
            Mode::Ppo => {
                if budget_bits.is_none() {
                    return Err(Error::Config(
                        "ppo mode needs --rmax-bits, --target-ratio or a config budget".into(),
                    ));
                }
                let out = adapt_per_image(&env, agent, &self.config.ppo, seed)?;
                let artifact = out.episode.outcome.artifact.clone();
                Ok(Compressed {
                    mode,
                    actions: out.episode.actions(),
                    bitstream: artifact.bitstream.clone(),
                    budget_bits,
                    minimum_bits,
                    adaptation: Some(out.report),
                    artifact: Some(artifact),
                })
            }
        }
    }

    /// Every uniform level whose stream fits `r_max`, decoded and scored, coarsest first.
    pub fn feasible_uniform(&self, image: &ImagePlane, r_max: f64) -> Result<Vec<(usize, Outcome<CodecArtifact>)>> {
        let codec = self.codec();
        let env = CodecEnv::new(&codec, image, r_max)?;
        env.check_feasible()?;
        let mut out = Vec::new();
        for a in 0..self.ladder.len() {
            if env.encode(&vec![a; env.num_blocks()])?.total_bits() <= r_max {
                out.push((a, env.evaluate(&vec![a; env.num_blocks()])?));
            }
        }
        Ok(out)
    }

    pub fn decompress(&self, bytes: &[u8], sampler_seed: Option<u64>) -> Result<ImagePlane> {
        let decoded = deserialize(bytes, &self.ladder)?;
        if decoded.model != self.bundle.entropy.quantized() {
            return Err(Error::Bitstream(
                "entropy model in stream does not match the loaded checkpoint".into(),
            ));
        }
        if decoded.header.block_size != self.config.block_size {
            return Err(Error::Bitstream(format!(
                "stream block size {} differs from configured {}",
                decoded.header.block_size, self.config.block_size
            )));
        }
        let sampler = SamplerConfig {
            seed: sampler_seed.unwrap_or(self.config.sampler.seed),
            ..self.config.sampler
        };
        let rec = reconstruct(
            &decoded.latent,
            &self.ladder,
            decoded.header.height,
            decoded.header.width,
            &self.bundle.denoiser,
            &self.schedule,
            &sampler,
        )?;
        Ok(rec.image)
    }
}

/// `.ppm`/`.pnm` files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::InsufficientData(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && matches!(ext, "ppm" | "pnm") {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
            out.push((name, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_images(dir: &Path) -> Result<Vec<(String, ImagePlane)>> {
    list_images(dir)?
        .into_iter()
        .map(|(name, path)| Ok((name, load_image(&path)?)))
        .collect()
}

/// One row of an RD sweep or evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct RdRecord {
    pub image: String,
    pub method: String,
    pub budget_bits: Option<f64>,
    pub bits: Option<f64>,
    pub pixels: usize,
    pub report: MetricReport,
}

impl RdRecord {
    pub fn bpp(&self) -> Option<f64> {
        self.bits.map(|b| b / self.pixels as f64)
    }

    /// Raw 24-bit size over stream size.
    pub fn ratio(&self) -> Option<f64> {
        self.bits.map(|b| 24.0 * self.pixels as f64 / b)
    }
}

const RD_HEADER: [&str; 6] = ["image", "method", "budget_bits", "bits", "bpp", "ratio"];

pub fn write_records(records: &[RdRecord], w: impl std::io::Write) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(RD_HEADER.iter().chain(MetricReport::CSV_HEADER.iter()))?;
    for r in records {
        let head = [
            r.image.clone(),
            r.method.clone(),
            opt(r.budget_bits),
            opt(r.bits),
            opt(r.bpp()),
            opt(r.ratio()),
        ];
        csv.write_record(head.iter().chain(r.report.csv_row().iter()))?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    /// One row per pair, then a `mean` row when any pair exists.
    pub records: Vec<RdRecord>,
    pub unpaired: Vec<String>,
}

fn mean_report(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricReport {
        mse: avg(|r| r.mse),
        psnr_db: avg(|r| r.psnr_db),
        ssim: avg(|r| r.ssim),
        lpips_proxy: avg(|r| r.lpips_proxy),
        dists_proxy: avg(|r| r.dists_proxy),
        utility: avg(|r| r.utility),
    }
}

/// Score reconstructions against originals paired by file name.
///
/// A `<stem>.pcdc` stream next to a reconstruction fills the rate columns; its sidecar names the method.
pub fn evaluate_dirs(originals: &Path, reconstructions: &Path, metrics: &MetricSuite) -> Result<Evaluation> {
    let orig = list_images(originals)?;
    let recon = list_images(reconstructions)?;
    let mut eval = Evaluation::default();
    for (name, _) in &recon {
        if !orig.iter().any(|(n, _)| n == name) {
            eval.unpaired.push(reconstructions.join(name).display().to_string());
        }
    }
    for (name, path) in &orig {
        let Some((_, rpath)) = recon.iter().find(|(n, _)| n == name) else {
            eval.unpaired.push(path.display().to_string());
            continue;
        };
        let (x, y) = (load_image(path)?, load_image(rpath)?);
        let stream = rpath.with_extension("pcdc");
        let bits = stream.metadata().ok().map(|m| 8.0 * m.len() as f64);
        let sidecar = if bits.is_some() { Sidecar::read(&stream)? } else { None };
        eval.records.push(RdRecord {
            image: name.clone(),
            method: sidecar.as_ref().and_then(|s| s.mode.clone()).unwrap_or_default(),
            budget_bits: sidecar.and_then(|s| s.budget_bits),
            bits,
            pixels: x.pixels(),
            report: metrics.evaluate(&x, &y)?,
        });
    }
    if !eval.records.is_empty() {
        let reports: Vec<MetricReport> = eval.records.iter().map(|r| r.report).collect();
        let mean_of = |f: fn(&RdRecord) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = eval.records.iter().map(f).collect();
            v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        let pixels = eval.records.iter().map(|r| r.pixels).sum::<usize>() / eval.records.len();
        let bits = mean_of(|r| r.bits);
        eval.records.push(RdRecord {
            image: "mean".into(),
            method: String::new(),
            budget_bits: mean_of(|r| r.budget_bits),
            bits,
            pixels,
            report: mean_report(&reports),
        });
    }
    Ok(eval)
}

/// For each image and budget: PPO allocation (`pcdc`) and the finest uniform level that fits.
///
/// The agent persists across images and budgets unless `reset_per_image` is set. Rows are sorted by bpp.
pub fn rd_sweep(session: &Session, images: &[(String, ImagePlane)], budgets: &[Budget]) -> Result<Vec<RdRecord>> {
    let mut agent = session.agent();
    let mut records = Vec::new();
    for (i, (name, image)) in images.iter().enumerate() {
        for (j, budget) in budgets.iter().enumerate() {
            let r_max = budget.bits_for(image.pixels())?;
            let seed = session.config.seed.wrapping_add((i * budgets.len() + j) as u64);
            let ppo = session.compress(image, Mode::Ppo, Some(r_max), &mut agent, seed)?;
            let art = ppo.artifact.expect("ppo mode decodes");
            records.push(RdRecord {
                image: name.clone(),
                method: Mode::Ppo.to_string(),
                budget_bits: Some(r_max),
                bits: Some(art.bitstream.total_bits()),
                pixels: image.pixels(),
                report: art.report,
            });
            let (a, uni) = session
                .feasible_uniform(image, r_max)?
                .pop()
                .ok_or(Error::InfeasibleBudget {
                    budget: r_max,
                    minimum: ppo.minimum_bits,
                })?;
            records.push(RdRecord {
                image: name.clone(),
                method: Mode::Uniform(a).to_string(),
                budget_bits: Some(r_max),
                bits: Some(uni.total_bits),
                pixels: image.pixels(),
                report: uni.artifact.report,
            });
        }
    }
    records.sort_by(|a, b| {
        a.bpp()
            .partial_cmp(&b.bpp())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.method.cmp(&b.method))
            .then_with(|| a.image.cmp(&b.image))
    });
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!("ppo".parse::<Mode>().unwrap(), Mode::Ppo);
        assert_eq!("uniform-3".parse::<Mode>().unwrap(), Mode::Uniform(2));
        assert_eq!(Mode::Uniform(0).to_string(), "uniform-1");
        for bad in ["uniform-0", "uniform-", "greedy", "uniform-x"] {
            assert!(bad.parse::<Mode>().is_err(), "{bad}");
        }
    }

    #[test]
    fn ratio_identity() {
        let r = RdRecord {
            image: "a".into(),
            method: "pcdc".into(),
            budget_bits: None,
            bits: Some(1000.0),
            pixels: 64 * 64,
            report: mean_report(&[MetricReport {
                mse: 0.0,
                psnr_db: 99.0,
                ssim: 1.0,
                lpips_proxy: 0.0,
                dists_proxy: 0.0,
                utility: 0.0,
            }]),
        };
        assert_eq!(r.ratio().unwrap() * 1000.0, 24.0 * 4096.0);
        assert_eq!(r.bpp().unwrap(), 1000.0 / 4096.0);
    }
}
