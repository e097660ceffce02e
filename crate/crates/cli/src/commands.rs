use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use patchcert::analysis::{stability_experiment, write_stability_csv, AnalysisConfig};
use patchcert::attack::{apply_patch, evaluate_attack, LocationPolicy, PatchTensor};
use patchcert::config::RunConfig;
use patchcert::experiment::{evaluate, forge_patch, prepare_models, sweep, write_sweep_csv, SweepParam};
use patchcert::report::{metric_rows, metrics, write_aggregate_csv, write_image_csv, write_json_records, ReportRow};
use patchcert::train::accuracy;
use patchcert::weights::{load_model, load_tensor, save_model, save_tensor};
use patchcert::{Certifier, Dataset, DetectionOutcome, Error, Model, Result};

const VANILLA_FILE: &str = "vanilla.pcrt";
const PRUNED_FILE: &str = "pruned.pcrt";
const MODELS_STAMP: &str = "models.fingerprint";

pub struct Context {
    cfg: RunConfig,
    out: PathBuf,
    fingerprint: String,
    start: Instant,
}

struct Models {
    vanilla: Model,
    pruned: Model,
}

impl Context {
    /// Creates the output directory and echoes the resolved config into it.
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self> {
        fs::create_dir_all(&out)?;
        fs::write(out.join("config.txt"), cfg.canonical())?;
        let fingerprint = cfg.fingerprint();
        eprintln!("config fingerprint {fingerprint} ({})", out.join("config.txt").display());
        Ok(Self {
            cfg,
            out,
            fingerprint,
            start: Instant::now(),
        })
    }

    fn wall_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = self.cfg.datasets()?;
        if test.is_empty() {
            return Err(Error::Data("test set is empty".into()));
        }
        Ok((train, test))
    }

    /// Cached models are reused only when written under the same config.
    fn models(&self, train: &Dataset) -> Result<Models> {
        let stamp = self.out.join(MODELS_STAMP);
        let cached = fs::read_to_string(&stamp).map(|s| s.trim() == self.fingerprint).unwrap_or(false);
        let mut models = if cached {
            Models {
                vanilla: load_model(&self.out.join(VANILLA_FILE))?,
                pruned: load_model(&self.out.join(PRUNED_FILE))?,
            }
        } else {
            let prepared = prepare_models(&self.cfg, train)?;
            eprintln!(
                "trained: final loss vanilla {:.4}, finetune {:.4}",
                prepared.vanilla_report.epoch_loss.last().copied().unwrap_or(f32::NAN),
                prepared.finetune_report.epoch_loss.last().copied().unwrap_or(f32::NAN)
            );
            save_model(&prepared.vanilla, &self.out.join(VANILLA_FILE))?;
            save_model(&prepared.pruned, &self.out.join(PRUNED_FILE))?;
            fs::write(&stamp, &self.fingerprint)?;
            Models {
                vanilla: prepared.vanilla,
                pruned: prepared.pruned,
            }
        };
        if !self.cfg.model.is_empty() {
            models.pruned = load_model(Path::new(&self.cfg.model))?;
        }
        Ok(models)
    }

    fn patch(&self, path: Option<&Path>, vanilla: &Model, train: &Dataset) -> Result<PatchTensor> {
        match path {
            Some(p) => PatchTensor::from_tensor(load_tensor(p)?),
            None => forge_patch(&self.cfg, vanilla, train),
        }
    }

    fn policy(&self) -> LocationPolicy {
        LocationPolicy::PerImageRandom {
            seed: self.cfg.attack_seed,
        }
    }

    fn write_rows(&self, name: &str, rows: &[(&str, f64)]) -> Result<()> {
        let wall = self.wall_ms();
        let rows: Vec<ReportRow> = rows
            .iter()
            .map(|&(metric, value)| ReportRow {
                metric: metric.to_string(),
                value,
                config_fingerprint: self.fingerprint.clone(),
                wall_ms: wall,
            })
            .collect();
        write_aggregate_csv(&rows, self.create(name)?)
    }

    pub fn train(&self) -> Result<()> {
        let (train, test) = self.datasets()?;
        let m = self.models(&train)?;
        let vanilla = f64::from(accuracy(&m.vanilla, &test, None)?);
        let pruned = f64::from(accuracy(&m.pruned, &test, Some(self.cfg.winner_rate))?);
        self.write_rows("train.csv", &[("vanilla_acc", vanilla), ("pruned_acc", pruned)])?;
        println!("vanilla_acc={vanilla:.4}, pruned_acc={pruned:.4}");
        Ok(())
    }

    pub fn attack(&self) -> Result<()> {
        let (train, test) = self.datasets()?;
        let m = self.models(&train)?;
        let patch = forge_patch(&self.cfg, &m.vanilla, &train)?;
        save_tensor(patch.tensor(), &self.out.join("patch.pcrt"))?;
        let cert = Certifier::new(&m.pruned, self.cfg.defense())?;
        let rep = evaluate_attack(&m.vanilla, Some(&cert), &test, &patch, &self.policy(), self.cfg.target)?;
        self.write_rows(
            "attack.csv",
            &[
                ("success_rate", f64::from(rep.success_rate)),
                ("defended_success_rate", f64::from(rep.defended_success_rate)),
                ("detection_rate", f64::from(rep.detection_rate)),
                ("mean_energy", f64::from(rep.mean_energy)),
            ],
        )?;
        println!(
            "success={:.4}, defended_success={:.4}, detection={:.4}, energy={:.4}",
            rep.success_rate, rep.defended_success_rate, rep.detection_rate, rep.mean_energy
        );
        Ok(())
    }

    fn report(&self, results: &[patchcert::report::ImageResult]) -> Result<()> {
        let m = metrics(results)?;
        write_aggregate_csv(&metric_rows(&m, &self.fingerprint, self.wall_ms()), self.create("aggregate.csv")?)?;
        write_image_csv(results, &self.fingerprint, self.create("images.csv")?)?;
        write_json_records(results, self.create("records.jsonl")?)?;
        println!("{}", m.summary());
        Ok(())
    }

    pub fn certify(&self) -> Result<()> {
        let (train, test) = self.datasets()?;
        let m = self.models(&train)?;
        let cert = Certifier::new(&m.pruned, self.cfg.defense())?;
        self.report(&evaluate(&cert, &test, None)?)
    }

    pub fn detect(&self, patch: Option<&Path>) -> Result<()> {
        let (train, test) = self.datasets()?;
        let m = self.models(&train)?;
        let patch = self.patch(patch, &m.vanilla, &train)?;
        let cert = Certifier::new(&m.pruned, self.cfg.defense())?;
        self.report(&evaluate(&cert, &test, Some((&patch, &self.policy())))?)
    }

    /// Compares the undefended pruned label with the recovered label on
    /// every patched image the defense alerts on.
    pub fn recover(&self, patch: Option<&Path>) -> Result<()> {
        let (train, test) = self.datasets()?;
        let m = self.models(&train)?;
        let patch = self.patch(patch, &m.vanilla, &train)?;
        let cert = Certifier::new(&m.pruned, self.cfg.defense())?;
        let policy = self.policy();
        let locs = policy.locations(test.len(), patch.side(), test.dims.height, test.dims.width)?;
        let results = evaluate(&cert, &test, Some((&patch, &policy)))?;
        let (mut alerted, mut attacked_ok, mut recovered_ok) = (0usize, 0usize, 0usize);
        for (r, loc) in results.iter().zip(&locs) {
            let Some((DetectionOutcome::Alert { recovered_label, .. }, _)) = &r.attacked else {
                continue;
            };
            alerted += 1;
            let xp = apply_patch(&test.images[r.image_id], &patch, *loc)?;
            attacked_ok += usize::from(cert.pruned_predict(&xp)?.0 == r.true_label);
            recovered_ok += usize::from(*recovered_label == Some(r.true_label));
        }
        let frac = |k: usize| if alerted == 0 { 0.0 } else { k as f64 / alerted as f64 };
        self.write_rows(
            "recover.csv",
            &[
                ("alerted", alerted as f64),
                ("attacked_acc", frac(attacked_ok)),
                ("recovered_acc", frac(recovered_ok)),
            ],
        )?;
        println!(
            "alerted={alerted}, attacked={:.4}, recovered={:.4}",
            frac(attacked_ok),
            frac(recovered_ok)
        );
        Ok(())
    }

    pub fn analyze(&self, patch: Option<&Path>) -> Result<()> {
        let (train, test) = self.datasets()?;
        let m = self.models(&train)?;
        let patch = self.patch(patch, &m.vanilla, &train)?;
        let mut acfg = AnalysisConfig::for_model(&m.vanilla);
        if self.cfg.top_n > 0 {
            acfg.top_n = self.cfg.top_n;
        }
        if self.cfg.bandwidth > 0.0 {
            acfg.bandwidth = self.cfg.bandwidth;
        }
        let rep = stability_experiment(&m.vanilla, &test, &patch, &self.policy(), &acfg)?;
        write_stability_csv(&rep.rows, self.create("stability.csv")?)?;
        println!(
            "benign_drop={:.2}, patched_recovery={:.2}, analysed={}, skipped={}",
            rep.benign_drop(),
            rep.patched_recovery(),
            rep.rows.len(),
            rep.skipped
        );
        Ok(())
    }

    pub fn sweep(&self, param: SweepParam, raw: &[String]) -> Result<()> {
        let (train, test) = self.datasets()?;
        let values = raw
            .iter()
            .map(|v| sweep_value(param, v, test.dims.height * test.dims.width))
            .collect::<Result<Vec<f64>>>()?;
        let m = self.models(&train)?;
        let points = sweep(&self.cfg, &m.vanilla, &m.pruned, &train, &test, param, &values)?;
        write_sweep_csv(param, &points, &self.fingerprint, self.create("sweep.csv")?)?;
        for p in &points {
            println!(
                "{}={}: merged={}, candidates={:.2}, clean={:.4}, certified={:.4}, pruned={:.4}",
                param.name(),
                p.value,
                p.merged_windows,
                p.avg_candidates,
                p.clean_acc,
                p.certified_acc,
                p.pruned_acc
            );
        }
        Ok(())
    }
}

/// Parses one sweep value. Patch sides written as `N%` are the side of a
/// square covering N percent of the image, rounded to the nearest pixel.
fn sweep_value(param: SweepParam, raw: &str, pixels: usize) -> Result<f64> {
    let raw = raw.trim();
    let bad = || Error::Config(format!("invalid sweep value '{raw}'"));
    match (param, raw.strip_suffix('%')) {
        (SweepParam::Patch, Some(pct)) => {
            let pct: f64 = pct.trim().parse().map_err(|_| bad())?;
            if !(pct > 0.0 && pct <= 100.0) {
                return Err(bad());
            }
            Ok((pct / 100.0 * pixels as f64).sqrt().round().max(1.0))
        }
        (_, Some(_)) => Err(Error::Config(format!("'{raw}': percentages only apply to patch sweeps"))),
        (_, None) => raw.parse().map_err(|_| bad()),
    }
}
