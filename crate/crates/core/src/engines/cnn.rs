//! Small same-padded volumetric CNN with exact backpropagation.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv;
use crate::error::{Error, Result};
use crate::phantom::FORMAT_VERSION;

pub const KERNEL_TAPS: usize = 27;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub cin: usize,
    pub cout: usize,
}

impl LayerSpec {
    fn weight_len(&self) -> usize {
        self.cin * self.cout * KERNEL_TAPS
    }

    fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }
}

/// Channel widths `[3, 8, 8, 1]` become layers 3->8, 8->8, 8->1.
pub fn layer_specs(widths: &[usize]) -> Result<Vec<LayerSpec>> {
    if widths.len() < 2 || widths.iter().any(|&w| w == 0) || *widths.last().unwrap() != 1 {
        return Err(Error::InvalidParams(format!("bad channel widths {widths:?}")));
    }
    Ok(widths.windows(2).map(|w| LayerSpec { cin: w[0], cout: w[1] }).collect())
}

/// Activations kept from the last training forward pass.
#[derive(Clone, Debug)]
pub struct Cache {
    dims: [usize; 3],
    /// Input to each layer, channel-major with a zero halo.
    inputs: Vec<Vec<f64>>,
    /// Output probabilities with a zero halo.
    output: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TinyCnn {
    pub layers: Vec<LayerSpec>,
    pub params: Vec<f64>,
    pub seed: u64,
    cache: Option<Cache>,
}

impl PartialEq for TinyCnn {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.seed == other.seed && self.params == other.params
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl TinyCnn {
    /// Normal weights with variance `1 / fan_in`, zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        let layers = layer_specs(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.iter().map(LayerSpec::param_len).sum());
        for spec in &layers {
            let fan_in = (spec.cin * KERNEL_TAPS) as f64;
            let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("positive std");
            params.extend((0..spec.weight_len()).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat(0.0).take(spec.cout));
        }
        Ok(Self {
            layers,
            params,
            seed,
            cache: None,
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        let mut m = Self::new(widths, 0)?;
        m.params.iter_mut().for_each(|p| *p = 0.0);
        Ok(m)
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].cin).chain(self.layers.iter().map(|l| l.cout)).collect()
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].cin
    }

    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            out.push(at);
            at += l.param_len();
        }
        out
    }

    fn run(&self, dims: [usize; 3], input: &[f64], mut keep: Option<&mut Vec<Vec<f64>>>) -> Result<Vec<f64>> {
        let n = dims.iter().product::<usize>();
        if input.len() != self.in_channels() * n || n == 0 {
            return Err(Error::InvalidParams(format!(
                "input has {} values, expected {} channels of {n}",
                input.len(),
                self.in_channels()
            )));
        }
        let pn = conv::padded_len(dims);
        let offsets = self.offsets();
        let last = self.layers.len() - 1;
        let mut cur = vec![0.0; self.in_channels() * pn];
        for (c, src) in input.chunks_exact(n).enumerate() {
            conv::pad(dims, src, &mut cur[c * pn..(c + 1) * pn]);
        }
        for (l, (spec, &off)) in self.layers.iter().zip(&offsets).enumerate() {
            let weights = &self.params[off..off + spec.weight_len()];
            let bias = &self.params[off + spec.weight_len()..off + spec.param_len()];
            let mut out = vec![0.0; spec.cout * pn];
            for (o, chunk) in out.chunks_exact_mut(pn).enumerate() {
                chunk.fill(bias[o]);
                for c in 0..spec.cin {
                    let w = &weights[(o * spec.cin + c) * KERNEL_TAPS..][..KERNEL_TAPS];
                    conv::accumulate(dims, w, &cur[c * pn..(c + 1) * pn], chunk);
                }
                if l == last {
                    conv::map_interior(dims, chunk, sigmoid);
                } else {
                    conv::map_interior(dims, chunk, f64::tanh);
                }
            }
            if let Some(store) = keep.as_deref_mut() {
                store.push(std::mem::replace(&mut cur, out));
            } else {
                cur = out;
            }
        }
        Ok(cur)
    }

    /// Probabilities for a channel-major input of shape `[cin, dims]`.
    pub fn forward(&self, dims: [usize; 3], input: &[f64]) -> Result<Vec<f64>> {
        let padded = self.run(dims, input, None)?;
        let mut out = vec![0.0; dims.iter().product()];
        conv::unpad(dims, &padded, &mut out);
        Ok(out)
    }

    /// Forward pass that keeps activations for [`TinyCnn::backward`].
    pub fn forward_train(&mut self, dims: [usize; 3], input: &[f64]) -> Result<Vec<f64>> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let output = self.run(dims, input, Some(&mut inputs))?;
        let mut out = vec![0.0; dims.iter().product()];
        conv::unpad(dims, &output, &mut out);
        self.cache = Some(Cache { dims, inputs, output });
        Ok(out)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Parameter gradients given d(loss)/d(probabilities) for the cached pass.
    pub fn backward(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache)?;
        let dims = cache.dims;
        let pn = conv::padded_len(dims);
        if upstream.len() != dims.iter().product::<usize>() {
            return Err(Error::InvalidParams("upstream gradient has the wrong length".into()));
        }
        let offsets = self.offsets();
        let mut grads = vec![0.0; self.params.len()];
        // gradient w.r.t. pre-activation of the output layer
        let mut g = vec![0.0; pn];
        conv::pad(dims, upstream, &mut g);
        g.iter_mut().zip(&cache.output).for_each(|(u, p)| *u *= p * (1.0 - p));
        for l in (0..self.layers.len()).rev() {
            let spec = self.layers[l];
            let off = offsets[l];
            let inp = &cache.inputs[l];
            let weights = &self.params[off..off + spec.weight_len()];
            let (gw, gb) = grads[off..off + spec.param_len()].split_at_mut(spec.weight_len());
            for o in 0..spec.cout {
                let go = &g[o * pn..(o + 1) * pn];
                gb[o] = go.iter().sum();
                for c in 0..spec.cin {
                    let t = (o * spec.cin + c) * KERNEL_TAPS;
                    conv::weight_grad(dims, &inp[c * pn..(c + 1) * pn], go, &mut gw[t..t + KERNEL_TAPS]);
                }
            }
            if l == 0 {
                break;
            }
            let mut gin = vec![0.0; spec.cin * pn];
            for c in 0..spec.cin {
                let dst = &mut gin[c * pn..(c + 1) * pn];
                for o in 0..spec.cout {
                    let t = (o * spec.cin + c) * KERNEL_TAPS;
                    conv::accumulate_transpose(dims, &weights[t..t + KERNEL_TAPS], &g[o * pn..(o + 1) * pn], dst);
                }
                conv::zero_halo(dims, dst);
            }
            // tanh' = 1 - a^2, with a the stored input of layer l
            for (gv, &a) in gin.iter_mut().zip(inp) {
                *gv *= 1.0 - a * a;
            }
            g = gin;
        }
        Ok(grads)
    }

    /// Rounds every parameter through f32, the checkpoint precision.
    pub fn quantize(&mut self) {
        self.params.iter_mut().for_each(|p| *p = f64::from(*p as f32));
    }

    pub fn params_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: String,
    layers: Vec<LayerSpec>,
    seed: u64,
    config: serde_json::Value,
    weights_file: String,
    n_params: usize,
    crc32: u32,
}

const WEIGHTS_FILE: &str = "weights.f32";

/// Writes `manifest.json` and `weights.f32` into `dir`. `config` is stored
/// verbatim for provenance.
pub fn save_checkpoint(model: &TinyCnn, config: &serde_json::Value, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let blob: Vec<u8> = model.params.iter().flat_map(|&p| (p as f32).to_le_bytes()).collect();
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION.into(),
        layers: model.layers.clone(),
        seed: model.seed,
        config: config.clone(),
        weights_file: WEIGHTS_FILE.into(),
        n_params: model.params.len(),
        crc32: crc32fast::hash(&blob),
    };
    let tmp = dir.join(format!("{WEIGHTS_FILE}.tmp"));
    fs::write(&tmp, &blob)?;
    fs::rename(&tmp, dir.join(WEIGHTS_FILE))?;
    let tmp = dir.join("manifest.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, dir.join("manifest.json"))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(TinyCnn, serde_json::Value)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path.display().to_string()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION.into(),
            found: manifest.format_version,
        });
    }
    let path = dir.join(&manifest.weights_file);
    if !path.exists() {
        return Err(Error::MissingMember(manifest.weights_file));
    }
    let blob = fs::read(&path)?;
    if blob.len() != manifest.n_params * 4 {
        return Err(Error::Truncated {
            name: manifest.weights_file,
            expected: manifest.n_params * 4,
            found: blob.len(),
        });
    }
    if crc32fast::hash(&blob) != manifest.crc32 {
        return Err(Error::Checksum(manifest.weights_file));
    }
    let mut widths = vec![manifest.layers.first().map_or(0, |l| l.cin)];
    widths.extend(manifest.layers.iter().map(|l| l.cout));
    let mut model = TinyCnn::new(&widths, manifest.seed)?;
    if model.layers != manifest.layers || model.params.len() != manifest.n_params {
        return Err(Error::InvalidParams("checkpoint layer layout is inconsistent".into()));
    }
    model.params = blob
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok((model, manifest.config))
}
