//! Shared dataset selection for the training and embedding subcommands.

use std::path::PathBuf;

use clap::ValueEnum;

use refprior::data::{gaussian_blobs, mnist_load, two_moons, Dataset};
use refprior::{Error, Result};

use crate::config::{pick, ConfigMap};

pub const MNIST_IMAGES_ENV: &str = "REFPRIOR_MNIST_IMAGES";
pub const MNIST_LABELS_ENV: &str = "REFPRIOR_MNIST_LABELS";

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    TwoMoons,
    Blobs,
    Mnist,
}

impl DatasetArg {
    pub fn name(self) -> &'static str {
        match self {
            DatasetArg::TwoMoons => "two-moons",
            DatasetArg::Blobs => "blobs",
            DatasetArg::Mnist => "mnist",
        }
    }

    fn from_name(name: &str) -> Result<Self> {
        match name {
            "two-moons" => Ok(DatasetArg::TwoMoons),
            "blobs" => Ok(DatasetArg::Blobs),
            "mnist" => Ok(DatasetArg::Mnist),
            other => Err(Error::Usage(format!(
                "unknown dataset `{other}`; expected two-moons, blobs, or mnist"
            ))),
        }
    }
}

#[derive(clap::Args)]
pub struct DataArgs {
    /// Dataset family: two-moons, blobs, or mnist.
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    /// Two-moons sample count.
    #[arg(long)]
    moons_n: Option<usize>,
    /// Two-moons noise standard deviation.
    #[arg(long)]
    moons_noise: Option<f64>,
    /// Gaussian-blob class count; centers sit on a circle of radius 2.
    #[arg(long)]
    blob_classes: Option<usize>,
    /// Samples per blob class.
    #[arg(long)]
    blob_n: Option<usize>,
    /// Blob standard deviation.
    #[arg(long)]
    blob_noise: Option<f64>,
    /// MNIST images IDX file; falls back to REFPRIOR_MNIST_IMAGES.
    #[arg(long)]
    mnist_images: Option<PathBuf>,
    /// MNIST labels IDX file; falls back to REFPRIOR_MNIST_LABELS.
    #[arg(long)]
    mnist_labels: Option<PathBuf>,
    /// Keep only the first N MNIST rows.
    #[arg(long)]
    mnist_subset: Option<usize>,
}

/// Fully resolved dataset choice.
pub struct DataParams {
    pub dataset: DatasetArg,
    pub moons_n: usize,
    pub moons_noise: f64,
    pub blob_classes: usize,
    pub blob_n: usize,
    pub blob_noise: f64,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    pub mnist_subset: Option<usize>,
}

impl DataParams {
    pub fn resolve(args: DataArgs, cfg: &mut ConfigMap, default: DatasetArg) -> Result<Self> {
        let file_dataset = match cfg.take::<String>("dataset")? {
            Some(name) => Some(DatasetArg::from_name(&name)?),
            None => None,
        };
        let params = Self {
            dataset: pick(args.dataset, file_dataset, default),
            moons_n: pick(args.moons_n, cfg.take("moons_n")?, 1000),
            moons_noise: pick(args.moons_noise, cfg.take("moons_noise")?, 0.1),
            blob_classes: pick(args.blob_classes, cfg.take("blob_classes")?, 6),
            blob_n: pick(args.blob_n, cfg.take("blob_n")?, 200),
            blob_noise: pick(args.blob_noise, cfg.take("blob_noise")?, 0.3),
            mnist_images: args.mnist_images.or(cfg.take("mnist_images")?),
            mnist_labels: args.mnist_labels.or(cfg.take("mnist_labels")?),
            mnist_subset: pick(args.mnist_subset.map(Some), cfg.take("mnist_subset")?.map(Some), None),
        };
        if params.dataset == DatasetArg::Mnist {
            // Paths are pinned down (and must exist) before any computation.
            let (images, labels) = params.mnist_paths()?;
            for path in [&images, &labels] {
                if !path.is_file() {
                    return Err(Error::Usage(format!("MNIST file not found: {}", path.display())));
                }
            }
        }
        Ok(params)
    }

    fn mnist_paths(&self) -> Result<(PathBuf, PathBuf)> {
        let images = self
            .mnist_images
            .clone()
            .or_else(|| std::env::var_os(MNIST_IMAGES_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                Error::Usage(format!("--mnist-images or {MNIST_IMAGES_ENV} required for mnist"))
            })?;
        let labels = self
            .mnist_labels
            .clone()
            .or_else(|| std::env::var_os(MNIST_LABELS_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                Error::Usage(format!("--mnist-labels or {MNIST_LABELS_ENV} required for mnist"))
            })?;
        Ok((images, labels))
    }

    pub fn build(&self, seed: u64) -> Result<Dataset> {
        match self.dataset {
            DatasetArg::TwoMoons => two_moons(self.moons_n, self.moons_noise, seed),
            DatasetArg::Blobs => {
                let c = self.blob_classes;
                if c < 2 {
                    return Err(Error::Usage("blobs need at least two classes".into()));
                }
                let centers: Vec<[f64; 2]> = (0..c)
                    .map(|j| {
                        let angle = 2.0 * std::f64::consts::PI * j as f64 / c as f64;
                        [2.0 * angle.cos(), 2.0 * angle.sin()]
                    })
                    .collect();
                gaussian_blobs(&centers, self.blob_noise, self.blob_n, seed)
            }
            DatasetArg::Mnist => {
                let (images, labels) = self.mnist_paths()?;
                let full = mnist_load(&images, &labels)?;
                match self.mnist_subset {
                    None => Ok(full),
                    Some(n) => {
                        let n = n.min(full.len());
                        let inputs = full.inputs().slice(ndarray::s![..n, ..]).to_owned();
                        let labels = full.labels().map(|ys| ys[..n].to_vec());
                        Dataset::new(inputs, labels, full.class_count(), full.kind())
                    }
                }
            }
        }
    }

    pub fn dump(&self, out: &mut Vec<(&'static str, String)>) {
        out.push(("dataset", self.dataset.name().to_string()));
        match self.dataset {
            DatasetArg::TwoMoons => {
                out.push(("moons_n", self.moons_n.to_string()));
                out.push(("moons_noise", self.moons_noise.to_string()));
            }
            DatasetArg::Blobs => {
                out.push(("blob_classes", self.blob_classes.to_string()));
                out.push(("blob_n", self.blob_n.to_string()));
                out.push(("blob_noise", self.blob_noise.to_string()));
            }
            DatasetArg::Mnist => {
                if let Ok((images, labels)) = self.mnist_paths() {
                    out.push(("mnist_images", images.display().to_string()));
                    out.push(("mnist_labels", labels.display().to_string()));
                }
                if let Some(n) = self.mnist_subset {
                    out.push(("mnist_subset", n.to_string()));
                }
            }
        }
    }
}
