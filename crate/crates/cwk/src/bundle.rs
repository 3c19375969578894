//! Weight bundles: `manifest.json` plus one CWKT file per weight tensor.

use std::fs;
use std::path::Path;

use clockwork_core::stagenet::{ConvLayer, LayerOp, StageSpec, StagedNetwork};
use serde::{Deserialize, Serialize};

use crate::cwkt::{
    array_to_kernels, array_to_vector, kernels_to_array, vector_to_array, CwktArray,
};
use crate::error::{CwkError, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "cwk-weights";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format: String,
    pub version: u32,
    pub input_channels: usize,
    pub n_classes: usize,
    pub seed: Option<u64>,
    pub stage_count: usize,
    pub stages: Vec<StageManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub downsample_factor: usize,
    pub ops: Vec<OpManifest>,
    pub score_head: ConvManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpManifest {
    Conv(ConvManifest),
    Relu,
    Maxpool { window: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvManifest {
    /// `[out, in, kh, kw]`.
    pub dims: [usize; 4],
    pub stride: usize,
    pub pad: usize,
    pub weights: String,
    pub bias: String,
}

fn save_conv(conv: &ConvLayer, dir: &Path, stem: &str) -> Result<ConvManifest> {
    let weights = format!("{stem}_w.cwkt");
    let bias = format!("{stem}_b.cwkt");
    kernels_to_array(&conv.kernels)?.write(&dir.join(&weights))?;
    vector_to_array(&conv.bias)?.write(&dir.join(&bias))?;
    Ok(ConvManifest {
        dims: conv.kernels.dims(),
        stride: conv.stride,
        pad: conv.pad,
        weights,
        bias,
    })
}

fn load_conv(m: &ConvManifest, dir: &Path) -> Result<ConvLayer> {
    let wpath = dir.join(&m.weights);
    let kernels = array_to_kernels(&CwktArray::read(&wpath)?, &wpath)?;
    if kernels.dims() != m.dims {
        return Err(CwkError::format(
            &wpath,
            format!(
                "dims {:?} differ from manifest {:?}",
                kernels.dims(),
                m.dims
            ),
        ));
    }
    let bpath = dir.join(&m.bias);
    let bias = array_to_vector(&CwktArray::read(&bpath)?, &bpath)?;
    if bias.len() != m.dims[0] {
        return Err(CwkError::format(
            &bpath,
            format!("{} biases for {} output channels", bias.len(), m.dims[0]),
        ));
    }
    Ok(ConvLayer {
        kernels,
        bias,
        stride: m.stride,
        pad: m.pad,
    })
}

pub fn save_weights(net: &StagedNetwork, dir: &Path) -> Result<WeightManifest> {
    use clockwork_core::stagenet::StageModel;
    fs::create_dir_all(dir).map_err(|e| CwkError::io(dir, e))?;
    let mut stages = Vec::with_capacity(net.stages().len());
    for (k, stage) in net.stages().iter().enumerate() {
        let mut ops = Vec::with_capacity(stage.ops.len());
        for (j, op) in stage.ops.iter().enumerate() {
            ops.push(match op {
                LayerOp::Conv(c) => OpManifest::Conv(save_conv(c, dir, &format!("s{k}_op{j}"))?),
                LayerOp::Relu => OpManifest::Relu,
                LayerOp::MaxPool { window, stride } => OpManifest::Maxpool {
                    window: *window,
                    stride: *stride,
                },
            });
        }
        let score_head = save_conv(&stage.score_head, dir, &format!("s{k}_head"))?;
        stages.push(StageManifest {
            downsample_factor: stage.downsample_factor,
            ops,
            score_head,
        });
    }
    let manifest = WeightManifest {
        format: FORMAT.into(),
        version: 1,
        input_channels: net.input_channels(),
        n_classes: net.n_classes(),
        seed: net.seed(),
        stage_count: stages.len(),
        stages,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| CwkError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_weight_manifest(dir: &Path) -> Result<WeightManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CwkError::io(&path, e))?;
    let manifest: WeightManifest =
        serde_json::from_str(&text).map_err(|e| CwkError::format(&path, e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(CwkError::format(
            &path,
            format!("not a v1 {FORMAT} manifest"),
        ));
    }
    if manifest.stage_count != manifest.stages.len() {
        return Err(CwkError::format(
            &path,
            format!(
                "stage_count {} but {} stages listed",
                manifest.stage_count,
                manifest.stages.len()
            ),
        ));
    }
    Ok(manifest)
}

pub fn load_weights(dir: &Path) -> Result<StagedNetwork> {
    let manifest = read_weight_manifest(dir)?;
    let mut stages = Vec::with_capacity(manifest.stages.len());
    for stage in &manifest.stages {
        let ops = stage
            .ops
            .iter()
            .map(|op| {
                Ok(match op {
                    OpManifest::Conv(c) => LayerOp::Conv(load_conv(c, dir)?),
                    OpManifest::Relu => LayerOp::Relu,
                    OpManifest::Maxpool { window, stride } => LayerOp::MaxPool {
                        window: *window,
                        stride: *stride,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let score_head = load_conv(&stage.score_head, dir)?;
        stages.push(StageSpec {
            ops,
            score_head,
            downsample_factor: stage.downsample_factor,
        });
    }
    StagedNetwork::new(
        manifest.input_channels,
        manifest.n_classes,
        stages,
        manifest.seed,
    )
    .map_err(|e| CwkError::format(dir.join(MANIFEST), e.to_string()))
}
