//! Genotype → architecture mapping and shape inference.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::genome::{mark_effective, Gene, GenomeError, Genotype};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PhenotypeError {
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error("genotype has no effective instructions")]
    NoEffectiveCode,
    #[error("layer {layer} ({kind}) reduces the spatial size below 1")]
    Shape { layer: usize, kind: String },
}

/// Height, width, channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape3 {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn size(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Conv layers are stride 1 with same padding followed by ReLU; pooling
/// is a 2x2 window with stride 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize },
    MaxPool,
    AvgPool,
    BatchNorm,
    Dropout { rate: f64 },
    DenseOutput { units: usize },
}

impl LayerSpec {
    pub fn from_gene(gene: Gene) -> Self {
        match gene {
            Gene::Conv { filters, kernel } => LayerSpec::Conv { filters, kernel },
            Gene::MaxPool => LayerSpec::MaxPool,
            Gene::AvgPool => LayerSpec::AvgPool,
            Gene::BatchNorm => LayerSpec::BatchNorm,
            Gene::Dropout(rate) => LayerSpec::Dropout { rate: rate.value() },
        }
    }

    fn is_pool(&self) -> bool {
        matches!(self, LayerSpec::MaxPool | LayerSpec::AvgPool)
    }

    /// Output shape for a spatial layer; `None` if it would collapse a
    /// spatial dimension. DenseOutput is not spatial and maps to
    /// `1x1xunits`.
    pub fn output_shape(&self, input: Shape3) -> Option<Shape3> {
        match *self {
            LayerSpec::Conv { filters, .. } => Some(Shape3 { channels: filters, ..input }),
            LayerSpec::MaxPool | LayerSpec::AvgPool => {
                let (h, w) = (input.height / 2, input.width / 2);
                (h >= 1 && w >= 1).then(|| Shape3::new(h, w, input.channels))
            }
            LayerSpec::BatchNorm | LayerSpec::Dropout { .. } => Some(input),
            LayerSpec::DenseOutput { units } => Some(Shape3::new(1, 1, units)),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { filters, kernel } => write!(f, "Conv({filters}, {kernel}x{kernel})"),
            LayerSpec::MaxPool => f.write_str("MaxPool(2x2)"),
            LayerSpec::AvgPool => f.write_str("AvgPool(2x2)"),
            LayerSpec::BatchNorm => f.write_str("BatchNorm"),
            LayerSpec::Dropout { rate } => write!(f, "Dropout({rate})"),
            LayerSpec::DenseOutput { units } => write!(f, "Flatten+Dense({units})+Softmax"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Shape3,
    pub num_classes: usize,
    /// Ends with exactly one `DenseOutput`.
    pub layers: Vec<LayerSpec>,
}

/// A layer that was left out of the phenotype because it would have shrunk
/// the feature map below 1x1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedLayer {
    pub instruction: usize,
    pub gene: Gene,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mapping {
    pub architecture: Architecture,
    pub dropped: Vec<DroppedLayer>,
}

/// Maps effective code to layers and appends the dense output head.
pub fn map_genotype(
    g: &Genotype,
    input_shape: Shape3,
    num_classes: usize,
) -> Result<Mapping, PhenotypeError> {
    let effective = mark_effective(g)?;
    if effective.is_empty() {
        return Err(PhenotypeError::NoEffectiveCode);
    }
    let mut layers = Vec::with_capacity(effective.len() + 1);
    let mut dropped = Vec::new();
    let mut shape = input_shape;
    for idx in effective {
        let gene = g.instructions[idx].gene;
        let layer = LayerSpec::from_gene(gene);
        match layer.output_shape(shape) {
            Some(next) => {
                shape = next;
                layers.push(layer);
            }
            None => {
                log::warn!("dropping {gene} at instruction {idx}: feature map is already {shape}");
                dropped.push(DroppedLayer {
                    instruction: idx,
                    gene,
                });
            }
        }
    }
    layers.push(LayerSpec::DenseOutput { units: num_classes });
    Ok(Mapping {
        architecture: Architecture {
            input_shape,
            num_classes,
            layers,
        },
        dropped,
    })
}

pub fn to_phenotype(
    g: &Genotype,
    input_shape: Shape3,
    num_classes: usize,
) -> Result<Architecture, PhenotypeError> {
    map_genotype(g, input_shape, num_classes).map(|m| m.architecture)
}

/// Output shape after every layer, in order. The final entry is
/// `1x1xnum_classes`.
pub fn infer_shapes(arch: &Architecture) -> Result<Vec<Shape3>, PhenotypeError> {
    let mut shape = arch.input_shape;
    if shape.height == 0 || shape.width == 0 {
        return Err(PhenotypeError::Shape {
            layer: 0,
            kind: "input".into(),
        });
    }
    let mut out = Vec::with_capacity(arch.layers.len());
    for (i, layer) in arch.layers.iter().enumerate() {
        shape = layer.output_shape(shape).ok_or_else(|| PhenotypeError::Shape {
            layer: i,
            kind: layer.to_string(),
        })?;
        out.push(shape);
    }
    Ok(out)
}

/// Number of entries in a semantics vector.
pub fn semantics_length(n_eval_samples: usize, num_classes: usize) -> usize {
    n_eval_samples * num_classes
}

impl Architecture {
    pub fn pool_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_pool()).count()
    }

    /// One layer per line with its inferred output shape.
    pub fn summary(&self) -> String {
        let mut out = format!("input {}\n", self.input_shape);
        match infer_shapes(self) {
            Ok(shapes) => {
                for (layer, shape) in self.layers.iter().zip(shapes) {
                    match layer {
                        LayerSpec::DenseOutput { units } => {
                            out.push_str(&format!("{layer} -> ({units},)\n"))
                        }
                        _ => out.push_str(&format!("{layer} -> {shape}\n")),
                    }
                }
            }
            Err(e) => out.push_str(&format!("invalid: {e}\n")),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{parse, random_genotype, repair, GenomeConfig};
    use rand::SeedableRng;

    #[test]
    fn fig1_program_maps_to_effective_chain() {
        // the figure's final `Dense` is the fixed head; the batch-norm line
        // stands in for that last r[0] write
        let g = parse(
            "r[0] := CONV_32_3x3(r[1])\nr[4] := MAX_POOL(r[3])\nr[7] := CONV_64_3x3(r[4])\n\
             r[5] := MAX_POOL(r[2])\nr[6] := CONV_64_3x3(r[5])\nr[3] := AVG_POOL(r[6])\n\
             r[5] := MAX_POOL(r[8])\nr[0] := BATCH_NORM(r[3])",
        )
        .unwrap();
        let arch = to_phenotype(&g, Shape3::new(16, 16, 1), 2).unwrap();
        assert_eq!(
            arch.layers,
            vec![
                LayerSpec::MaxPool,
                LayerSpec::Conv { filters: 64, kernel: 3 },
                LayerSpec::AvgPool,
                LayerSpec::BatchNorm,
                LayerSpec::DenseOutput { units: 2 },
            ]
        );
    }

    #[test]
    fn single_batch_norm() {
        let g = parse("r[0] := BATCH_NORM(r[1])").unwrap();
        let arch = to_phenotype(&g, Shape3::new(8, 8, 1), 3).unwrap();
        assert_eq!(arch.layers, vec![LayerSpec::BatchNorm, LayerSpec::DenseOutput { units: 3 }]);
    }

    #[test]
    fn excess_pools_are_dropped() {
        let text: String = (0..6)
            .map(|i| {
                let dest = if i == 5 { 0 } else { 1 };
                format!("r[{dest}] := MAX_POOL(r[1])\n")
            })
            .collect();
        let g = parse(&text).unwrap();
        let m = map_genotype(&g, Shape3::new(8, 8, 1), 2).unwrap();
        // 8 -> 4 -> 2 -> 1, then nothing left to halve
        assert_eq!(m.architecture.pool_count(), 3);
        assert_eq!(m.dropped.len(), 3);
        assert!(infer_shapes(&m.architecture).is_ok());
    }

    #[test]
    fn shape_rules() {
        let arch = Architecture {
            input_shape: Shape3::new(64, 64, 3),
            num_classes: 2,
            layers: vec![
                LayerSpec::Conv { filters: 32, kernel: 3 },
                LayerSpec::MaxPool,
                LayerSpec::DenseOutput { units: 2 },
            ],
        };
        let s = infer_shapes(&arch).unwrap();
        assert_eq!(s[0], Shape3::new(64, 64, 32));
        assert_eq!(s[1], Shape3::new(32, 32, 32));
        assert_eq!(s[2], Shape3::new(1, 1, 2));
        assert_eq!(LayerSpec::AvgPool.output_shape(Shape3::new(5, 5, 7)), Some(Shape3::new(2, 2, 7)));
        assert_eq!(LayerSpec::MaxPool.output_shape(Shape3::new(1, 4, 7)), None);
    }

    #[test]
    fn direct_callers_get_shape_errors() {
        let arch = Architecture {
            input_shape: Shape3::new(2, 2, 1),
            num_classes: 2,
            layers: vec![LayerSpec::MaxPool, LayerSpec::AvgPool, LayerSpec::DenseOutput { units: 2 }],
        };
        assert!(matches!(infer_shapes(&arch), Err(PhenotypeError::Shape { layer: 1, .. })));
    }

    #[test]
    fn semantics_lengths() {
        assert_eq!(semantics_length(200, 2), 400);
        assert_eq!(semantics_length(1, 1), 1);
        assert_eq!(semantics_length(989, 2), 1978);
    }

    #[test]
    fn intron_neutral_mapping() {
        let cfg = GenomeConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let g = random_genotype(&cfg, &mut rng).unwrap();
            let shape = Shape3::new(16, 16, 1);
            let a = to_phenotype(&g, shape, 2).unwrap();
            let b = to_phenotype(&repair(&g).unwrap(), shape, 2).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, to_phenotype(&g, shape, 2).unwrap());
            assert!(infer_shapes(&a).is_ok());
            assert_eq!(a.layers.last(), Some(&LayerSpec::DenseOutput { units: 2 }));
        }
    }

    #[test]
    fn summary_lists_shapes() {
        let g = parse("r[1] := CONV_32_5x5(r[1])\nr[0] := AVG_POOL(r[1])").unwrap();
        let arch = to_phenotype(&g, Shape3::new(16, 16, 1), 2).unwrap();
        assert_eq!(
            arch.summary(),
            "input 16x16x1\nConv(32, 5x5) -> 16x16x32\nAvgPool(2x2) -> 8x8x32\nFlatten+Dense(2)+Softmax -> (2,)\n"
        );
    }
}
