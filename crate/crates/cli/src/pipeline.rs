//! Stage implementations. Every stage reads its inputs from and writes its
//! outputs to the run directory, so stages can be run one at a time.
//!
//! ```text
//! out_dir/
//!   manifest.toml
//!   subjects/<id>/   s0 r2star omega mask f clean corrupted .vol
//!                    nlls_{s0,r2star} learn_img learn_img_r2star learn_bio_{s0,r2star} .vol
//!   models/          img.ckpt bio.ckpt img_history.csv bio_history.csv
//!   report.csv  report_per_slice.csv
//!   images/          <id>_<method>_r2star_diff.pgm
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use mgre_core::fit::{fit_volume, FitMode, FitStats};
use mgre_core::metrics::{aggregate_table, difference_map, relative_error, ssim, MetricReport, MetricRow, Method, Target};
use mgre_core::motion::{corrupt, sample_script, CorruptionLevel, MotionScript};
use mgre_core::phantom::{default_tissue_specs, generate_phantom, jitter_specs, PhantomVolume};
use mgre_core::signal::{add_complex_noise, compute_f_function, estimate_f_function, simulate_mgre};
use mgre_core::tensor::{BinaryMask, MultiEchoVolume, RealMap};
use mgre_learn::checkpoint::{read_checkpoint, write_checkpoint};
use mgre_learn::data::build_samples;
use mgre_learn::infer::{infer_bio, infer_img};
use mgre_learn::train::train_with;
use mgre_learn::{Arch, CorrectorModel, Dataset};

use crate::config::{RunConfig, ScriptRecord, Stage};
use crate::error::CliError;
use crate::image::export_image;
use crate::volume::{Role, VolumeFile};

/// SplitMix64 finaliser over `(seed, stream, index)`; gives every random
/// draw of a run its own reproducible seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_PHANTOM: u64 = 1;
const STREAM_MOTION: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_MODEL: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Position in the run's subject list; keys the derived seeds.
    pub index: u64,
    pub level: CorruptionLevel,
    pub train: bool,
}

/// Training subjects first, then `seeds_per_level` test subjects per level.
pub fn subjects(cfg: &RunConfig) -> Vec<Subject> {
    let mut out = Vec::new();
    for i in 0..cfg.motion.train_subjects {
        let level = cfg.motion.train_levels[i % cfg.motion.train_levels.len()];
        out.push(Subject { id: format!("train_{i:03}"), index: out.len() as u64, level, train: true });
    }
    for &level in &cfg.motion.levels {
        for k in 0..cfg.motion.seeds_per_level {
            out.push(Subject { id: format!("test_{level}_{k:03}"), index: out.len() as u64, level, train: false });
        }
    }
    out
}

/// Fills in a motion script for every subject that the config does not
/// already pin, and drops records for unknown subjects.
pub fn resolve(cfg: &RunConfig) -> Result<RunConfig, CliError> {
    let mut out = cfg.clone();
    let ny = cfg.phantom.dims[1];
    let mut scripts = Vec::new();
    for s in subjects(cfg) {
        let script = match cfg.scripts.iter().find(|r| r.subject == s.id) {
            Some(r) => {
                r.script.validate(ny).map_err(|e| CliError::Config(format!("field `scripts` ({}): {e}", s.id)))?;
                r.script.clone()
            }
            None => sample_script(derive_seed(cfg.seed, STREAM_MOTION, s.index), ny, s.level)?,
        };
        scripts.push(ScriptRecord { subject: s.id, script });
    }
    out.scripts = scripts;
    Ok(out)
}

pub struct Run {
    pub cfg: RunConfig,
    pub root: PathBuf,
    pub quiet: bool,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

impl Run {
    /// Resolves the config and writes the manifest.
    pub fn new(cfg: &RunConfig, quiet: bool) -> Result<Self, CliError> {
        let cfg = resolve(cfg)?;
        let root = cfg.out_dir.clone();
        let run = Self { cfg, root, quiet };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&self) -> Result<(), CliError> {
        let text = format!(
            "# mgre {} run manifest; load with --config to replay\n{}",
            env!("CARGO_PKG_VERSION"),
            self.cfg.to_toml()
        );
        write_text(&self.root.join("manifest.toml"), &text)
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    pub fn subject_dir(&self, s: &Subject) -> PathBuf {
        self.root.join("subjects").join(&s.id)
    }

    fn path(&self, s: &Subject, name: &str) -> PathBuf {
        self.subject_dir(s).join(format!("{name}.vol"))
    }

    fn write(&self, s: &Subject, name: &str, file: VolumeFile) -> Result<(), CliError> {
        file.write(&self.path(s, name))
    }

    fn read(&self, s: &Subject, name: &str) -> Result<VolumeFile, CliError> {
        VolumeFile::read(&self.path(s, name))
    }

    fn read_mgre(&self, s: &Subject, name: &str) -> Result<MultiEchoVolume, CliError> {
        self.read(s, name)?.to_mgre()
    }

    fn read_map(&self, s: &Subject, name: &str, role: Role) -> Result<RealMap, CliError> {
        self.read(s, name)?.to_map(role)
    }

    fn read_mask(&self, s: &Subject) -> Result<BinaryMask, CliError> {
        self.read(s, "mask")?.to_mask()
    }

    fn script(&self, s: &Subject) -> &MotionScript {
        &self.cfg.scripts.iter().find(|r| r.subject == s.id).expect("resolved").script
    }

    pub fn run(&self, stage: Stage) -> Result<(), CliError> {
        match stage {
            Stage::All => Stage::ORDER.iter().try_for_each(|&s| self.run(s)),
            Stage::Phantom => self.phantom(),
            Stage::Simulate => self.simulate(),
            Stage::Corrupt => self.corrupt(),
            Stage::Fit => self.fit(),
            Stage::Train => self.train(),
            Stage::Infer => self.infer(),
            Stage::Evaluate => self.evaluate().map(|_| ()),
        }
    }

    fn phantom(&self) -> Result<(), CliError> {
        self.log("phantom: generating subjects");
        let (vs, es) = (mgre_core::tensor::VoxelSize::default(), self.cfg.echo);
        for s in subjects(&self.cfg) {
            let seed = derive_seed(self.cfg.seed, STREAM_PHANTOM, s.index);
            let specs = jitter_specs(&default_tissue_specs(), seed, self.cfg.phantom.jitter);
            let ph = generate_phantom(seed, self.cfg.phantom.dims, &specs)?;
            let f = compute_f_function(&ph, &es, self.cfg.phantom.subgrid)?;
            self.write(&s, "s0", VolumeFile::from_map(Role::S0, &ph.s0_map, vs, es))?;
            self.write(&s, "r2star", VolumeFile::from_map(Role::R2star, &ph.r2star_map, vs, es))?;
            self.write(&s, "omega", VolumeFile::from_map(Role::Omega, &ph.omega_map, vs, es))?;
            self.write(&s, "mask", VolumeFile::from_mask(&ph.brain_mask, vs, es))?;
            self.write(&s, "f", VolumeFile::from_f_table(&f, vs, es))?;
        }
        Ok(())
    }

    fn simulate(&self) -> Result<(), CliError> {
        self.log("simulate: forward model");
        for s in subjects(&self.cfg) {
            let s0 = self.read(&s, "s0")?;
            let vs = s0.header.voxel_size;
            let s0 = s0.to_map(Role::S0)?;
            let dims = s0.dims();
            let ph = PhantomVolume {
                r2star_map: self.read_map(&s, "r2star", Role::R2star)?,
                omega_map: self.read_map(&s, "omega", Role::Omega)?,
                brain_mask: self.read_mask(&s)?,
                field_gradient_maps: [RealMap::zeros(dims), RealMap::zeros(dims), RealMap::zeros(dims)],
                labels: Vec::new(),
                voxel_size: vs,
                s0_map: s0,
            };
            let f = self.read(&s, "f")?.to_f_table()?;
            let mut clean = simulate_mgre(&ph, &self.cfg.echo, &f)?;
            if self.cfg.phantom.noise_sigma > 0.0 {
                let seed = derive_seed(self.cfg.seed, STREAM_NOISE, s.index);
                clean = add_complex_noise(&clean, self.cfg.phantom.noise_sigma, seed)?;
            }
            self.write(&s, "clean", VolumeFile::from_mgre(&clean))?;
        }
        Ok(())
    }

    fn corrupt(&self) -> Result<(), CliError> {
        self.log("corrupt: k-space line replacement");
        for s in subjects(&self.cfg) {
            let clean = self.read_mgre(&s, "clean")?;
            let out = corrupt(&clean, self.script(&s))?;
            self.write(&s, "corrupted", VolumeFile::from_mgre(&out))?;
        }
        Ok(())
    }

    /// NLLS with an `F` estimated from the data being fitted.
    fn nlls(&self, v: &MultiEchoVolume, mask: &BinaryMask) -> Result<(RealMap, RealMap, FitStats), CliError> {
        let f = estimate_f_function(v, mask, self.cfg.phantom.subgrid)?;
        let (maps, stats) = fit_volume(v, &f, mask, &self.cfg.fit, FitMode::Magnitude)?;
        Ok((maps.s0_map, maps.r2star_map, stats))
    }

    fn write_maps(&self, s: &Subject, prefix: &str, s0: &RealMap, r2: &RealMap) -> Result<(), CliError> {
        let f = self.read(s, "corrupted")?;
        let (vs, es) = (f.header.voxel_size, f.header.echo);
        self.write(s, &format!("{prefix}_s0"), VolumeFile::from_map(Role::S0, s0, vs, es))?;
        self.write(s, &format!("{prefix}_r2star"), VolumeFile::from_map(Role::R2star, r2, vs, es))
    }

    fn fit(&self) -> Result<(), CliError> {
        self.log("fit: NLLS on corrupted test subjects");
        for s in subjects(&self.cfg).into_iter().filter(|s| !s.train) {
            let v = self.read_mgre(&s, "corrupted")?;
            let mask = self.read_mask(&s)?;
            let (s0, r2, stats) = self.nlls(&v, &mask)?;
            self.write_maps(&s, "nlls", &s0, &r2)?;
            let text = format!(
                "voxels = {}\niterations = {}\nrejected_steps = {}\ndegenerate = {}\n",
                stats.voxels, stats.iterations, stats.rejected_steps, stats.degenerate
            );
            write_text(&self.subject_dir(&s).join("nlls_stats.toml"), &text)?;
        }
        Ok(())
    }

    fn train(&self) -> Result<(), CliError> {
        let models = self.root.join("models");
        for arch in [Arch::Img, Arch::Bio] {
            let mut data = Dataset { samples: Vec::new(), times: self.cfg.echo.times() };
            for s in subjects(&self.cfg).into_iter().filter(|s| s.train) {
                let corrupted = self.read_mgre(&s, "corrupted")?;
                let clean = self.read_mgre(&s, "clean")?;
                let mask = self.read_mask(&s)?;
                let f = match arch {
                    Arch::Bio => Some(self.read(&s, "f")?.to_f_table()?),
                    Arch::Img => None,
                };
                data.samples.extend(build_samples(arch, &corrupted, &clean, f.as_ref(), &mask)?);
            }
            let name = match arch {
                Arch::Img => "img",
                Arch::Bio => "bio",
            };
            self.log(&format!("train: {name} model on {} slices", data.samples.len()));
            let seed = derive_seed(self.cfg.seed, STREAM_MODEL, arch.tag() as u64);
            let model = CorrectorModel::unet(arch, self.cfg.echo.n_echoes, seed)?;
            let every = (self.cfg.train.epochs / 10).max(1);
            let (model, history) = train_with(&model, &data, &self.cfg.train, |r| {
                if r.epoch % every == 0 {
                    self.log(&format!("  {name} epoch {} train {:.4e} val {:?}", r.epoch, r.train_loss, r.val_loss));
                }
            })?;
            fs::create_dir_all(&models)?;
            let mut bytes = Vec::new();
            write_checkpoint(&model, &mut bytes)?;
            fs::write(models.join(format!("{name}.ckpt")), bytes)?;
            write_text(&models.join(format!("{name}_history.csv")), &history.to_csv())?;
        }
        Ok(())
    }

    fn load_model(&self, name: &str) -> Result<CorrectorModel, CliError> {
        let path = self.root.join("models").join(format!("{name}.ckpt"));
        let bytes = fs::read(&path).map_err(|_| CliError::MissingDependency(path.display().to_string()))?;
        Ok(read_checkpoint(bytes.as_slice())?)
    }

    fn infer(&self) -> Result<(), CliError> {
        self.log("infer: applying trained models to test subjects");
        let (img, bio) = (self.load_model("img")?, self.load_model("bio")?);
        for s in subjects(&self.cfg).into_iter().filter(|s| !s.train) {
            let v = self.read_mgre(&s, "corrupted")?;
            let mask = self.read_mask(&s)?;
            let corrected = infer_img(&img, &v)?;
            self.write(&s, "learn_img", VolumeFile::from_mgre(&corrected))?;
            // re-read so the fit sees exactly the stored single-precision data
            let corrected = self.read_mgre(&s, "learn_img")?;
            let (s0, r2, _) = self.nlls(&corrected, &mask)?;
            self.write_maps(&s, "learn_img", &s0, &r2)?;
            let maps = infer_bio(&bio, &v)?;
            self.write_maps(&s, "learn_bio", &maps.s0_map, &maps.r2star_map)?;
        }
        Ok(())
    }

    /// Scores every test subject slice by slice and writes the report.
    pub fn evaluate(&self) -> Result<MetricReport, CliError> {
        self.log("evaluate: RE and SSIM against ground truth");
        let mut rows = Vec::new();
        for s in subjects(&self.cfg).into_iter().filter(|s| !s.train) {
            let mask = self.read_mask(&s)?;
            let truth = self.read_map(&s, "r2star", Role::R2star)?;
            let clean = self.read_mgre(&s, "clean")?;
            let [nl, ny, nz] = truth.dims();
            let r2_methods = [
                (Method::Nlls, self.read_map(&s, "nlls_r2star", Role::R2star)?),
                (Method::LearnImg, self.read_map(&s, "learn_img_r2star", Role::R2star)?),
                (Method::LearnBio, self.read_map(&s, "learn_bio_r2star", Role::R2star)?),
            ];
            let mgre_methods = [
                (Method::Input, self.read_mgre(&s, "corrupted")?),
                (Method::LearnImg, self.read_mgre(&s, "learn_img")?),
            ];
            for l in 0..nl {
                let m = mask.slice(l);
                if !m.iter().any(|&b| b) {
                    continue;
                }
                for (method, map) in &r2_methods {
                    if let Some((re, ss)) = self.score(map.slice(l), truth.slice(l), ny, nz, m)? {
                        rows.push(MetricRow { method: *method, level: s.level, target: Target::R2star, re_percent: re, ssim: ss, n_slices: 1 });
                    }
                }
                for (method, v) in &mgre_methods {
                    let mut acc = (0.0, 0.0, 0usize);
                    for n in 0..clean.shape().echoes {
                        if let Some((re, ss)) = self.score(&v.magnitude_image(l, n), &clean.magnitude_image(l, n), ny, nz, m)? {
                            acc = (acc.0 + re, acc.1 + ss, acc.2 + 1);
                        }
                    }
                    if acc.2 > 0 {
                        let k = acc.2 as f64;
                        rows.push(MetricRow { method: *method, level: s.level, target: Target::Mgre, re_percent: acc.0 / k, ssim: acc.1 / k, n_slices: 1 });
                    }
                }
            }
            let mid = nl / 2;
            for (method, map) in &r2_methods {
                let diff = difference_map(map.slice(mid), truth.slice(mid), mask.slice(mid))?;
                let name = format!("{}_{}_r2star_diff.pgm", s.id, method.as_str().to_lowercase());
                export_image(&diff, ny, nz, Some(mask.slice(mid)), &self.root.join("images").join(name), (0.0, 20.0))?;
            }
        }
        let report = aggregate_table(&rows)?;
        write_text(&self.root.join("report.csv"), &report.to_csv())?;
        let per_slice = MetricReport { rows: report.per_slice.clone(), per_slice: Vec::new() };
        write_text(&self.root.join("report_per_slice.csv"), &per_slice.to_csv())?;
        Ok(report)
    }

    /// RE and SSIM of one slice, or `None` when the reference is degenerate
    /// there.
    fn score(&self, est: &[f64], reference: &[f64], ny: usize, nz: usize, mask: &[bool]) -> Result<Option<(f64, f64)>, CliError> {
        let re = match relative_error(est, reference, mask) {
            Ok(v) => v,
            Err(mgre_core::Error::DegenerateInput(_)) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        match ssim(est, reference, ny, nz, mask, &self.cfg.ssim) {
            Ok(v) => Ok(Some((re, v))),
            Err(mgre_core::Error::DegenerateInput(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}
