//! On-disk formats: dataset manifests, model directories (parameters plus latents), latent samples.
//!
//! A model directory holds `params.json`, the template mesh it references and, optionally,
//! `latents.json`. Simulation truth and estimation output share this layout.

use std::path::{Path, PathBuf};

use longdef::model::{IndividualLatents, LatentState};
use longdef::shape::{read_shape, write_shape};
use longdef::{LongitudinalDataset, ModelParams, Observation, Points, Subject};
use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const PARAMS_FILE: &str = "params.json";
pub const LATENTS_FILE: &str = "latents.json";
pub const TEMPLATE_FILE: &str = "template.mesh";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(path.display(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| CliError::data(path.display(), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestObservation {
    pub time: f64,
    /// Mesh path, relative to the manifest's directory.
    pub mesh: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSubject {
    pub id: String,
    pub observations: Vec<ManifestObservation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dimension: usize,
    pub subjects: Vec<ManifestSubject>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        read_json(path)
    }

    /// Reads every referenced mesh and checks times and dimensions.
    pub fn load_dataset(path: &Path) -> CliResult<LongitudinalDataset> {
        let manifest = Self::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut subjects = Vec::with_capacity(manifest.subjects.len());
        for s in &manifest.subjects {
            let mut obs = Vec::with_capacity(s.observations.len());
            for o in &s.observations {
                if !o.time.is_finite() {
                    return Err(CliError::Data(format!("subject {}: non-finite time", s.id)));
                }
                let mesh_path = base.join(&o.mesh);
                let shape = read_shape(&mesh_path).map_err(|e| CliError::data(mesh_path.display(), e))?;
                if shape.dim() != manifest.dimension {
                    return Err(CliError::Data(format!(
                        "{}: dimension {} differs from the manifest's {}",
                        mesh_path.display(),
                        shape.dim(),
                        manifest.dimension
                    )));
                }
                obs.push(Observation { time: o.time, shape });
            }
            subjects.push(Subject::new(s.id.clone(), obs).map_err(|e| CliError::data(format!("subject {}", s.id), e))?);
        }
        LongitudinalDataset::new(subjects).map_err(|e| CliError::data(path.display(), e))
    }

    /// Writes one mesh per observation under `dir/meshes` and the manifest at `dir/manifest.json`.
    pub fn write_dataset(dir: &Path, dataset: &LongitudinalDataset) -> CliResult<PathBuf> {
        let mesh_dir = dir.join("meshes");
        std::fs::create_dir_all(&mesh_dir)?;
        let mut subjects = Vec::new();
        for s in &dataset.subjects {
            let mut observations = Vec::new();
            for (j, o) in s.observations.iter().enumerate() {
                let rel = PathBuf::from("meshes").join(format!("{}_{j:02}.mesh", s.id));
                write_shape(&o.shape, dir.join(&rel))?;
                observations.push(ManifestObservation { time: o.time, mesh: rel });
            }
            subjects.push(ManifestSubject { id: s.id.clone(), observations });
        }
        let dimension = dataset.subjects.first().and_then(|s| s.observations.first()).map_or(2, |o| o.shape.dim());
        let path = dir.join("manifest.json");
        write_json(&path, &DatasetManifest { dimension, subjects })?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub format: String,
    pub version: u32,
    pub template: PathBuf,
    pub control_points: Vec<Vec<f64>>,
    pub momenta: Vec<Vec<f64>>,
    /// Rows of the `(d n_cp) x n_s` mixing matrix.
    pub mixing: Vec<Vec<f64>>,
    pub reference_time: f64,
    pub var_time_shift: f64,
    pub var_log_accel: f64,
    pub var_noise: f64,
}

pub const PARAMS_FORMAT: &str = "longdef-params";

fn rows(p: &Points) -> Vec<Vec<f64>> {
    p.iter().map(|r| r.to_vec()).collect()
}

fn points(rows: &[Vec<f64>], what: &str) -> CliResult<Points> {
    let dim = rows.first().map_or(0, |r| r.len());
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(CliError::Data(format!("{what}: rows must be non-empty and of equal length")));
    }
    Points::new(dim, rows.concat()).map_err(|e| CliError::data(what, e))
}

fn matrix(rows: &[Vec<f64>]) -> CliResult<DMatrix<f64>> {
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(CliError::Data("mixing rows differ in length".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), nc, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentRecord {
    pub id: String,
    pub onset_age: f64,
    pub log_acceleration: f64,
    pub sources: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentsFile {
    pub format: String,
    pub version: u32,
    pub subjects: Vec<LatentRecord>,
}

pub const LATENTS_FORMAT: &str = "longdef-latents";

/// Parameters and, when present, per-subject latents of a model directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDir {
    pub params: ModelParams,
    pub latents: Option<Vec<(String, IndividualLatents)>>,
}

impl ModelDir {
    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        let p = &self.params;
        write_shape(&p.mean_template, dir.join(TEMPLATE_FILE))?;
        let file = ParamsFile {
            format: PARAMS_FORMAT.into(),
            version: 1,
            template: PathBuf::from(TEMPLATE_FILE),
            control_points: rows(&p.mean_control_points),
            momenta: rows(&p.mean_momenta),
            mixing: p.mean_mixing.row_iter().map(|r| r.iter().copied().collect()).collect(),
            reference_time: p.reference_time,
            var_time_shift: p.var_time_shift,
            var_log_accel: p.var_log_accel,
            var_noise: p.var_noise,
        };
        write_json(&dir.join(PARAMS_FILE), &file)?;
        if let Some(latents) = &self.latents {
            let subjects = latents
                .iter()
                .map(|(id, z)| LatentRecord {
                    id: id.clone(),
                    onset_age: z.onset_age,
                    log_acceleration: z.log_acceleration,
                    sources: z.sources.clone(),
                })
                .collect();
            write_json(&dir.join(LATENTS_FILE), &LatentsFile { format: LATENTS_FORMAT.into(), version: 1, subjects })?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let file: ParamsFile = read_json(&dir.join(PARAMS_FILE))?;
        if file.format != PARAMS_FORMAT || file.version != 1 {
            return Err(CliError::Data(format!("{}: not a {PARAMS_FORMAT} v1 file", dir.display())));
        }
        let template_path = dir.join(&file.template);
        let params = ModelParams {
            mean_template: read_shape(&template_path).map_err(|e| CliError::data(template_path.display(), e))?,
            mean_control_points: points(&file.control_points, "control_points")?,
            mean_momenta: points(&file.momenta, "momenta")?,
            mean_mixing: matrix(&file.mixing)?,
            reference_time: file.reference_time,
            var_time_shift: file.var_time_shift,
            var_log_accel: file.var_log_accel,
            var_noise: file.var_noise,
        };
        params.validate().map_err(|e| CliError::data(dir.display(), e))?;
        let latents_path = dir.join(LATENTS_FILE);
        let latents = if latents_path.exists() {
            let f: LatentsFile = read_json(&latents_path)?;
            if f.format != LATENTS_FORMAT || f.version != 1 {
                return Err(CliError::Data(format!("{}: not a {LATENTS_FORMAT} v1 file", latents_path.display())));
            }
            Some(
                f.subjects
                    .into_iter()
                    .map(|r| {
                        (r.id, IndividualLatents { onset_age: r.onset_age, log_acceleration: r.log_acceleration, sources: r.sources })
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(Self { params, latents })
    }

    pub fn with_state(params: ModelParams, dataset: &LongitudinalDataset, state: &LatentState) -> Self {
        let latents = dataset.subjects.iter().zip(&state.individuals).map(|(s, z)| (s.id.clone(), z.clone())).collect();
        Self { params, latents: Some(latents) }
    }
}

/// A geodesic and an optional space-shift vector for `shoot` and `transport`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeodesicFile {
    /// Mesh path, relative to this file.
    pub template: PathBuf,
    pub control_points: Vec<Vec<f64>>,
    pub momenta: Vec<Vec<f64>>,
    #[serde(default)]
    pub vector: Option<Vec<Vec<f64>>>,
}

pub struct GeodesicInput {
    pub template: longdef::Shape,
    pub control_points: Points,
    pub momenta: Points,
    pub vector: Option<Points>,
}

impl GeodesicFile {
    pub fn load(path: &Path) -> CliResult<GeodesicInput> {
        let f: GeodesicFile = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let tpath = base.join(&f.template);
        let template = read_shape(&tpath).map_err(|e| CliError::data(tpath.display(), e))?;
        let control_points = points(&f.control_points, "control_points")?;
        let momenta = points(&f.momenta, "momenta")?;
        if control_points.len() != momenta.len() || control_points.dim() != template.dim() || momenta.dim() != template.dim() {
            return Err(CliError::Data("control points, momenta and template must agree in count and dimension".into()));
        }
        let vector = f.vector.as_deref().map(|v| points(v, "vector")).transpose()?;
        if let Some(v) = &vector {
            if v.len() != momenta.len() || v.dim() != momenta.dim() {
                return Err(CliError::Data("vector must have one row per control point".into()));
            }
        }
        Ok(GeodesicInput { template, control_points, momenta, vector })
    }
}
