//! The JSON experiment configuration: one document with `data`, `network`,
//! `optimizer`, and `output` sections plus optional `sweep` and `gradcheck`
//! sections. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ofsnet::data::{generate_planted, load_idx, load_tensor, Dataset, DatasetMeta, PlantedConfig};
use ofsnet::network::{ConvLayerSpec, LossConfig, NetworkSpec, OptimizerConfig, PoolSpec};
use ofsnet::rng::Stream;
use ofsnet::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }
}

/// Data source, keyed by its single top-level field:
/// `{"planted": {...}}`, `{"idx": {...}}`, or `{"tensor": {...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    Planted(PlantedSection),
    Idx(IdxSection),
    Tensor(TensorSection),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSection {
    pub resolution: (usize, usize),
    pub positive_extent: usize,
    pub negative_extent: usize,
    #[serde(default = "default_blobs")]
    pub blobs_per_image: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Size of the held-out evaluation set (generated from a derived seed).
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_blobs() -> usize {
    3
}
fn default_noise() -> f64 {
    1.0
}
fn default_samples() -> usize {
    512
}
fn default_eval_samples() -> usize {
    256
}

impl PlantedSection {
    pub fn train_config(&self) -> PlantedConfig {
        PlantedConfig {
            resolution: self.resolution,
            positive_extent: self.positive_extent,
            negative_extent: self.negative_extent,
            blobs_per_image: self.blobs_per_image,
            noise_sigma: self.noise_sigma,
            n_samples: self.n_samples,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> PlantedConfig {
        let mut cfg = self.train_config();
        cfg.n_samples = self.eval_samples;
        cfg.seed = Stream::new(self.seed).derive("eval").seed();
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSection {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub positive_class: u8,
    #[serde(default)]
    pub eval_images: Option<PathBuf>,
    #[serde(default)]
    pub eval_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSection {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub eval_images: Option<PathBuf>,
    #[serde(default)]
    pub eval_labels: Option<PathBuf>,
}

impl DataConfig {
    /// Load or generate the (train, eval) dataset pair. Sources without a
    /// separate evaluation set reuse the training set.
    pub fn load(&self) -> ofsnet::Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Planted(p) => {
                let train = generate_planted(&p.train_config())?;
                let eval = generate_planted(&p.eval_config())?;
                Ok((train, eval))
            }
            DataConfig::Idx(s) => {
                let train = load_idx(&s.images, &s.labels, s.positive_class)?;
                let eval = match (&s.eval_images, &s.eval_labels) {
                    (Some(ei), Some(el)) => load_idx(ei, el, s.positive_class)?,
                    _ => train.clone(),
                };
                Ok((train, eval))
            }
            DataConfig::Tensor(s) => {
                let train = load_tensor_pair(&s.images, &s.labels)?;
                let eval = match (&s.eval_images, &s.eval_labels) {
                    (Some(ei), Some(el)) => load_tensor_pair(ei, el)?,
                    _ => train.clone(),
                };
                Ok((train, eval))
            }
        }
    }
}

fn load_tensor_pair(images: &Path, labels: &Path) -> ofsnet::Result<Dataset> {
    let samples = load_tensor(images)?;
    let label_tensor = load_tensor(labels)?;
    if samples.rank() != 4 || samples.shape[1] != 1 {
        return Err(ofsnet::Error::Format(format!(
            "sample tensor must be (N, 1, H, W), found {:?}",
            samples.shape
        )));
    }
    if label_tensor.rank() != 1 || label_tensor.shape[0] != samples.shape[0] {
        return Err(ofsnet::Error::Format(format!(
            "label tensor must be rank-1 with {} entries, found {:?}",
            samples.shape[0], label_tensor.shape
        )));
    }
    let labels = label_tensor.data.iter().map(|&v| u8::from(v != 0.0)).collect();
    let source = format!("tensor({})", images.display());
    Ok(Dataset {
        samples,
        labels,
        metadata: DatasetMeta {
            source,
            seed: 0,
            degenerate_samples: 0,
        },
    })
}

/// Network section: a [`NetworkSpec`] minus the input resolution, which
/// comes from the data source.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "default_conv_layers")]
    pub conv_layers: Vec<ConvLayerSpec>,
    #[serde(default)]
    pub pool: PoolSpec,
    #[serde(default = "default_fc_nodes")]
    pub fc_nodes: usize,
    #[serde(default)]
    pub loss: LossConfig,
}

fn default_fc_nodes() -> usize {
    64
}

fn default_conv_layers() -> Vec<ConvLayerSpec> {
    NetworkSpec::default_three_layer((64, 48)).conv_layers
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            conv_layers: default_conv_layers(),
            pool: PoolSpec::default(),
            fc_nodes: 64,
            loss: LossConfig::default(),
        }
    }
}

impl NetworkSection {
    pub fn to_spec(&self, input_resolution: (usize, usize)) -> NetworkSpec {
        NetworkSpec {
            input_resolution,
            conv_layers: self.conv_layers.clone(),
            pool: self.pool.clone(),
            fc_nodes: self.fc_nodes,
            loss: self.loss.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: default_out_dir() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_sizes() -> Vec<usize> {
    vec![3, 5, 7, 9]
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            sizes: default_sizes(),
            seeds: default_seeds(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_coord_samples")]
    pub weight_samples: usize,
    #[serde(default = "default_coord_samples")]
    pub input_samples: usize,
    /// Probe batch size drawn from the head of the dataset.
    #[serde(default = "default_probe_batch")]
    pub batch: usize,
    /// Debug switch: doubles the analytic size gradient so the check must
    /// fail and name the size parameter.
    #[serde(default)]
    pub corrupt_size_grad: bool,
}

fn default_h() -> f64 {
    1e-5
}
fn default_tolerance() -> f64 {
    1e-4
}
fn default_coord_samples() -> usize {
    200
}
fn default_probe_batch() -> usize {
    4
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            h: default_h(),
            tolerance: default_tolerance(),
            weight_samples: default_coord_samples(),
            input_samples: default_coord_samples(),
            batch: default_probe_batch(),
            corrupt_size_grad: false,
        }
    }
}

/// Sample tensor batch from the head of a dataset, for gradient probes.
pub fn head_batch(data: &Dataset, n: usize) -> (Tensor, Vec<u8>) {
    let take: Vec<usize> = (0..n.min(data.len())).collect();
    data.batch(&take)
}
