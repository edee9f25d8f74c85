//! Offline multi-scale component dictionaries: K-means centroids of encoder
//! features cropped around each facial component.

mod io;
mod kmeans;

pub use io::{load_dictionary, save_dictionary, DICT_MAGIC, DICT_VERSION, FORMAT_VERSION, MANIFEST_FILE};
pub use kmeans::{kmeans, KMeansConfig, KMeansResult};

use candle_core::{DType, Device, Tensor};

use crate::dataset::FaceRecord;
use crate::error::{Error, Result};
use crate::features::{component_rois, extract_features, roi_align, Component, ComponentSizes, Encoder, EncoderConfig, RoiBox, NUM_SCALES};
use crate::imaging::Image;

/// Number of images pushed through the encoder at once while collecting samples.
const COLLECT_BATCH: usize = 8;

/// K centroids for one (scale, component), each shaped like the component crop.
#[derive(Debug, Clone)]
pub struct ComponentDictionary {
    scale: usize,
    component: Component,
    /// `[K, C, h, w]`.
    dims: [usize; 4],
    data: Vec<f32>,
    tensor: Tensor,
}

impl PartialEq for ComponentDictionary {
    fn eq(&self, other: &Self) -> bool {
        self.scale == other.scale && self.component == other.component && self.dims == other.dims && self.data == other.data
    }
}

impl ComponentDictionary {
    pub fn new(scale: usize, component: Component, dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        crate::features::check_scale(scale)?;
        if dims[0] == 0 {
            return Err(Error::param(format!("dictionary ({scale}, {component}) has K=0")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "dictionary ({scale}, {component}) has {} values for dims {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("dictionary ({scale}, {component}) holds non-finite values")));
        }
        let tensor = Tensor::from_slice(&data, dims.as_slice(), &Device::Cpu)?;
        Ok(Self {
            scale,
            component,
            dims,
            data,
            tensor,
        })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn component(&self) -> Component {
        self.component
    }

    pub fn k(&self) -> usize {
        self.dims[0]
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    /// `(C, h, w)` of one cluster.
    pub fn cluster_shape(&self) -> (usize, usize, usize) {
        (self.dims[1], self.dims[2], self.dims[3])
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cluster(&self, k: usize) -> &[f32] {
        let n = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[k * n..(k + 1) * n]
    }

    /// `(K, C, h, w)` clusters in the requested dtype.
    pub fn tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(self.tensor.to_device(device)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryManifest {
    pub format_version: u32,
    pub k: usize,
    pub encoder_hash: String,
    pub encoder_config: EncoderConfig,
    pub seed: u64,
    pub sample_count: usize,
    pub resolution: usize,
}

/// All 16 dictionaries (4 scales x 4 components) and their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionarySet {
    manifest: DictionaryManifest,
    /// Indexed by `(scale - 1) * 4 + component`.
    dicts: Vec<ComponentDictionary>,
}

fn slot(scale: usize, component: Component) -> usize {
    (scale - 1) * Component::ALL.len() + component.index()
}

impl DictionarySet {
    pub fn new(manifest: DictionaryManifest, dicts: Vec<ComponentDictionary>) -> Result<Self> {
        let mut ordered: Vec<Option<ComponentDictionary>> = vec![None; NUM_SCALES * Component::ALL.len()];
        for d in dicts {
            let i = slot(d.scale, d.component);
            if ordered[i].is_some() {
                return Err(Error::Validation(format!("duplicate dictionary ({}, {})", d.scale, d.component)));
            }
            ordered[i] = Some(d);
        }
        let mut out = Vec::with_capacity(ordered.len());
        for (i, d) in ordered.into_iter().enumerate() {
            let (s, c) = (i / 4 + 1, Component::ALL[i % 4]);
            let d = d.ok_or_else(|| Error::Validation(format!("dictionary ({s}, {c}) is missing")))?;
            if d.k() != manifest.k {
                return Err(Error::Validation(format!(
                    "dictionary (s={s}, {c}) holds {} clusters, manifest says K={}",
                    d.k(),
                    manifest.k
                )));
            }
            if d.dims[1] != manifest.encoder_config.channels[s - 1] {
                return Err(Error::Validation(format!(
                    "dictionary (s={s}, {c}) has {} channels, encoder has {}",
                    d.dims[1],
                    manifest.encoder_config.channels[s - 1]
                )));
            }
            out.push(d);
        }
        Ok(Self { manifest, dicts: out })
    }

    pub fn manifest(&self) -> &DictionaryManifest {
        &self.manifest
    }

    pub fn k(&self) -> usize {
        self.manifest.k
    }

    pub fn encoder_hash(&self) -> &str {
        &self.manifest.encoder_hash
    }

    pub fn get(&self, scale: usize, component: Component) -> &ComponentDictionary {
        &self.dicts[slot(scale, component)]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ComponentDictionary> {
        self.dicts.iter()
    }

    /// Crop sizes the dictionaries were built with.
    pub fn sizes(&self) -> ComponentSizes {
        ComponentSizes {
            scale1: Component::ALL.map(|c| self.get(1, c).dims[2]),
        }
    }
}

/// Flattened component crops for one (scale, component).
#[derive(Debug, Clone)]
pub struct SamplePool {
    pub scale: usize,
    pub component: Component,
    /// `(C, h, w)` of each sample.
    pub shape: (usize, usize, usize),
    /// `count x C*h*w`, row-major.
    pub data: Vec<f32>,
}

impl SamplePool {
    pub fn dim(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim()..(i + 1) * self.dim()]
    }
}

#[derive(Debug, Clone)]
pub struct SamplePools {
    pub resolution: usize,
    /// Images that contributed samples.
    pub image_count: usize,
    /// Indexed like the dictionaries: `(scale - 1) * 4 + component`.
    pub pools: Vec<SamplePool>,
}

impl SamplePools {
    pub fn get(&self, scale: usize, component: Component) -> &SamplePool {
        &self.pools[slot(scale, component)]
    }
}

/// Runs the encoder over every usable record and RoIAligns each component
/// at each scale. Records without landmarks, of the wrong size or with a
/// degenerate component box are skipped with a warning.
pub fn collect_samples(records: &[FaceRecord], encoder: &Encoder, resolution: usize) -> Result<SamplePools> {
    let sizes = ComponentSizes::for_resolution(resolution);
    let mut usable: Vec<(&Image, [RoiBox; 4])> = Vec::new();
    for r in records {
        let Some(lm) = &r.landmarks else {
            log::warn!("skipping {}: no landmarks", r.id);
            continue;
        };
        if r.image.height() != resolution || r.image.width() != resolution {
            log::warn!(
                "skipping {}: {}x{} is not the model resolution {resolution}",
                r.id,
                r.image.height(),
                r.image.width()
            );
            continue;
        }
        match component_rois(lm, (resolution, resolution)) {
            Ok(boxes) => usable.push((&r.image, boxes)),
            Err(e) => log::warn!("skipping {}: {e}", r.id),
        }
    }
    if usable.is_empty() {
        return Err(Error::Data("no usable images for dictionary construction".into()));
    }
    let mut pools: Vec<SamplePool> = Vec::with_capacity(16);
    for s in 1..=NUM_SCALES {
        for c in Component::ALL {
            let n = sizes.size(c, s);
            pools.push(SamplePool {
                scale: s,
                component: c,
                shape: (encoder.channels(s), n, n),
                data: Vec::new(),
            });
        }
    }
    let device = Device::Cpu;
    for chunk in usable.chunks(COLLECT_BATCH) {
        let imgs: Vec<&Image> = chunk.iter().map(|(i, _)| *i).collect();
        let batch = Image::batch_to_tensor(&imgs, encoder.dtype(), &device)?;
        let fms = extract_features(&batch, encoder, resolution)?;
        for pool in &mut pools {
            let boxes: Vec<RoiBox> = chunk.iter().map(|(_, b)| b[pool.component.index()]).collect();
            let crop = roi_align(&fms[pool.scale - 1], &boxes, (pool.shape.1, pool.shape.2))?;
            let flat = crop.data.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            pool.data.extend_from_slice(&flat);
        }
    }
    Ok(SamplePools {
        resolution,
        image_count: usable.len(),
        pools,
    })
}

/// Per-(scale, component) K-means seed derived from the run seed.
fn job_seed(seed: u64, scale: usize, component: Component) -> u64 {
    seed ^ ((slot(scale, component) as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Clusters already collected pools into a dictionary set. The 16 K-means
/// jobs run on a scoped thread pool sized to the available cores.
pub fn cluster_pools(pools: &SamplePools, encoder: &Encoder, k: usize, seed: u64) -> Result<DictionarySet> {
    if k == 0 {
        return Err(Error::param("K must be at least 1"));
    }
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(pools.pools.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<Result<ComponentDictionary>>> = (0..pools.pools.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(pool) = pools.pools.get(i) else { break };
                        done.push((i, cluster_one(pool, k, seed)));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("k-means worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let dicts = results
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DictionaryManifest {
        format_version: FORMAT_VERSION,
        k,
        encoder_hash: encoder.hash().to_string(),
        encoder_config: encoder.config().clone(),
        seed,
        sample_count: pools.image_count,
        resolution: pools.resolution,
    };
    DictionarySet::new(manifest, dicts)
}

fn cluster_one(pool: &SamplePool, k: usize, seed: u64) -> Result<ComponentDictionary> {
    let cfg = KMeansConfig::new(k, job_seed(seed, pool.scale, pool.component));
    let res = kmeans(&pool.data, pool.dim(), &cfg).map_err(|e| match e {
        Error::Parameter(m) => Error::Parameter(format!("({}, {}): {m}", pool.scale, pool.component)),
        other => other,
    })?;
    log::debug!(
        "k-means ({}, {}): inertia {:.4e} after {} iterations",
        pool.scale,
        pool.component,
        res.inertia,
        res.inertia_history.iter().map(Vec::len).max().unwrap_or(0)
    );
    let (c, h, w) = pool.shape;
    let data = res.centroids.iter().map(|&v| v as f32).collect();
    ComponentDictionary::new(pool.scale, pool.component, [k, c, h, w], data)
}

/// Builds the full dictionary set from high-quality faces. All usable
/// images must share one square resolution, which becomes the model's.
pub fn build_dictionary(records: &[FaceRecord], encoder: &Encoder, k: usize, seed: u64) -> Result<DictionarySet> {
    let resolution = records
        .iter()
        .find(|r| r.landmarks.is_some())
        .map(|r| r.image.height())
        .ok_or_else(|| Error::Data("no usable images for dictionary construction".into()))?;
    let pools = collect_samples(records, encoder, resolution)?;
    cluster_pools(&pools, encoder, k, seed)
}

#[cfg(test)]
mod tests;
