use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use edr_core::math::Vec3;
use edr_core::scene::{generate_procedural_scene, load_scene};
use edr_core::{Camera, PipelineConfig, Scene, SceneSpec};
use serde::Deserialize;

/// Run configuration, read from TOML. Relative paths are resolved against
/// the directory holding the file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Scene file written by `gen-scene`. When absent the scene is
    /// generated from `[procedural]`.
    pub scene: Option<PathBuf>,
    #[serde(default)]
    pub procedural: ProceduralSource,
    #[serde(default)]
    pub camera: CameraConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProceduralSource {
    /// Scene recipe; the built-in benchmark scene when absent.
    pub spec: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ProceduralSource {
    fn default() -> Self {
        Self { spec: None, seed: 1 }
    }
}

/// Either an explicit pinhole (`position`, `look_at`, `up`, `focal`) or an
/// orbit around the cube centre given as `[azimuth, elevation, distance]`
/// in degrees and world units.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    pub position: Option<[f64; 3]>,
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub focal: Option<f64>,
    pub orbit: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            position: None,
            look_at: [0.5; 3],
            up: [0.0, 1.0, 0.0],
            focal: None,
            orbit: [30.0, 20.0, 2.0],
        }
    }
}

impl CameraConfig {
    pub fn build(&self) -> Result<Camera> {
        let cam = match self.position {
            Some(p) => {
                let focal = self.focal.context("camera.focal is required with camera.position")?;
                Camera::look_at(
                    Vec3::from_array(p),
                    Vec3::from_array(self.look_at),
                    Vec3::from_array(self.up),
                    focal,
                    self.width,
                    self.height,
                )?
            }
            None => {
                let [az, el, dist] = self.orbit;
                let mut cam = Camera::orbit(az, el, dist, self.width, self.height)?;
                if let Some(f) = self.focal {
                    cam.focal = f;
                }
                cam
            }
        };
        Ok(cam)
    }

    /// Same view at a different resolution.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        let k = width.min(height) as f64 / self.width.min(self.height) as f64;
        Self { width, height, focal: self.focal.map(|f| f * k), ..self.clone() }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub image: PathBuf,
    /// Defaults to the image path with a `.csv` extension.
    pub metrics: Option<PathBuf>,
    pub report: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { image: "render.ppm".into(), metrics: None, report: "ablation.csv".into() }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.scene.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.procedural.spec.as_mut() {
            fix(p);
        }
        fix(&mut cfg.output.image);
        fix(&mut cfg.output.report);
        if let Some(p) = cfg.output.metrics.as_mut() {
            fix(p);
        }
        cfg.pipeline.validate()?;
        Ok(cfg)
    }

    /// Loads or generates the scene, returning it with a short identifier.
    pub fn scene(&self, seed: Option<u64>) -> Result<(Scene, String)> {
        if let Some(path) = &self.scene {
            if seed.is_some() {
                bail!("--seed applies to procedural scenes only; {} is a scene file", path.display());
            }
            let scene = load_scene(path).with_context(|| format!("loading scene {}", path.display()))?;
            return Ok((scene, path.display().to_string()));
        }
        let spec = match &self.procedural.spec {
            Some(p) => read_spec(p)?,
            None => SceneSpec::default_scene(),
        };
        let seed = seed.unwrap_or(self.procedural.seed);
        let scene = generate_procedural_scene(&spec, seed)?;
        let name = self.procedural.spec.as_ref().map_or("default".to_string(), |p| p.display().to_string());
        Ok((scene, format!("{name}#seed{seed}")))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output.metrics.clone().unwrap_or_else(|| self.output.image.with_extension("csv"))
    }
}

pub fn read_spec(path: &Path) -> Result<SceneSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SceneSpec::from_toml_str(&text)?)
}
