//! Trunk and exit-head builders.
//!
//! Head block names are prefixed with their exit name (`ev1/dw`), so every
//! graph built here satisfies the unique-name rule.

use super::{BlockSpec, ExitKind, ExitSpec, GraphSpec, LayerKind};
use crate::tensor::Padding;
use crate::{Error, Result};

/// Widths of the four convolution layers of the small CNN trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn4Config {
    pub widths: [usize; 4],
    /// Max-pool after conv1 and conv2.
    pub pool: [bool; 4],
}

impl Cnn4Config {
    /// 28×28 grayscale digits: 28 → 14 → 7.
    pub fn mnist() -> Self {
        Self {
            widths: [8, 16, 32, 32],
            pool: [true, true, false, false],
        }
    }

    /// Narrow variant for unit tests and the 16×16 synthetic set.
    pub fn tiny(_input: [usize; 3]) -> Self {
        Self {
            widths: [4, 8, 8, 8],
            pool: [true, false, false, false],
        }
    }

    /// 16×16 synthetic shapes at full speed: 16 → 8.
    pub fn synth() -> Self {
        Self {
            widths: [8, 16, 16, 16],
            pool: [true, false, false, false],
        }
    }
}

/// Four 3×3 same-padded conv layers with ReLU, optional 2×2 max-pool.
/// Block names: `conv{i}`, `relu{i}`, `pool{i}` for i in 1..=4.
pub fn cnn4(cfg: &Cnn4Config) -> Vec<BlockSpec> {
    let mut trunk = Vec::new();
    for (i, (&filters, &pool)) in cfg.widths.iter().zip(&cfg.pool).enumerate() {
        let i = i + 1;
        trunk.push(BlockSpec::new(
            format!("conv{i}"),
            LayerKind::Conv2d {
                filters,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
        ));
        trunk.push(BlockSpec::new(format!("relu{i}"), LayerKind::Relu));
        if pool {
            trunk.push(BlockSpec::new(format!("pool{i}"), LayerKind::MaxPool2));
        }
    }
    trunk
}

/// Name of the last block of each weight-bearing layer, in order. The
/// output of layer `i` (1-based) is `layer_ends(trunk)[i - 1]`.
pub fn layer_ends(trunk: &[BlockSpec]) -> Vec<String> {
    let mut ends: Vec<String> = Vec::new();
    for b in trunk {
        if b.kind.has_params() {
            ends.push(b.name.clone());
        } else if let Some(last) = ends.last_mut() {
            *last = b.name.clone();
        }
    }
    ends
}

/// Block name holding the trunk output after `layer` weight-bearing layers.
pub fn after_layer(trunk: &[BlockSpec], layer: usize) -> Result<String> {
    layer_ends(trunk)
        .get(layer.wrapping_sub(1))
        .cloned()
        .ok_or_else(|| Error::Graph(format!("trunk has no layer {layer}")))
}

pub const FINAL_EXIT: &str = "final";

/// The original output block: global average pool → dense(L). Pooling
/// keeps the final head the same size class as the early-view heads.
pub fn final_exit(trunk: &[BlockSpec], classes: usize) -> ExitSpec {
    ExitSpec {
        name: FINAL_EXIT.into(),
        attach_after: trunk.last().map(|b| b.name.clone()).unwrap_or_default(),
        kind: ExitKind::Final,
        head: vec![
            BlockSpec::new(format!("{FINAL_EXIT}/gap"), LayerKind::GlobalAvgPool),
            BlockSpec::new(format!("{FINAL_EXIT}/dense"), LayerKind::Dense { units: classes }),
        ],
        partner: None,
    }
}

pub fn base_spec(trunk: &[BlockSpec], input: [usize; 3], classes: usize) -> GraphSpec {
    GraphSpec {
        input,
        classes,
        trunk: trunk.to_vec(),
        exits: vec![final_exit(trunk, classes)],
        deployed: false,
    }
}

fn depthwise_head(prefix: &str, classes: usize) -> Vec<BlockSpec> {
    vec![
        BlockSpec::new(
            format!("{prefix}/dw"),
            LayerKind::DepthwiseConv2d {
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
        ),
        BlockSpec::new(format!("{prefix}/relu"), LayerKind::Relu),
        BlockSpec::new(format!("{prefix}/gap"), LayerKind::GlobalAvgPool),
        BlockSpec::new(format!("{prefix}/dense"), LayerKind::Dense { units: classes }),
    ]
}

fn check_locations(trunk: &[BlockSpec], locations: &[String]) -> Result<Vec<usize>> {
    let depth = trunk.iter().filter(|b| b.kind.has_params()).count();
    if locations.is_empty() {
        return Err(Error::Graph("need at least one exit location".into()));
    }
    if locations.len() + 1 > depth {
        return Err(Error::Graph(format!(
            "{} exits exceed the {} available locations (depth {depth})",
            locations.len(),
            depth.saturating_sub(1)
        )));
    }
    let mut positions = Vec::with_capacity(locations.len());
    for loc in locations {
        let pos = trunk
            .iter()
            .position(|b| &b.name == loc)
            .ok_or_else(|| Error::Graph(format!("unknown exit location `{loc}`")))?;
        if positions.last().is_some_and(|&p| pos <= p) {
            return Err(Error::Graph(format!(
                "exit locations must be distinct and strictly increasing along the trunk, `{loc}` is not"
            )));
        }
        positions.push(pos);
    }
    if *positions.last().expect("nonempty") + 1 >= trunk.len() {
        return Err(Error::Graph("an early exit cannot attach after the last trunk block".into()));
    }
    Ok(positions)
}

/// Trunk with K partnered early-exit/early-view pairs plus the final exit.
/// Exit order: `ee1..eeK`, `ev1..evK`, `final`.
pub fn qute_spec(trunk: &[BlockSpec], input: [usize; 3], classes: usize, locations: &[String]) -> Result<GraphSpec> {
    check_locations(trunk, locations)?;
    let last = trunk.last().expect("checked nonempty").name.clone();
    let last_width = trunk_width(trunk, input);
    let mut exits = Vec::new();
    for (k, loc) in locations.iter().enumerate() {
        let ee = format!("ee{}", k + 1);
        let mut head = vec![BlockSpec::new(format!("{ee}/pw"), LayerKind::PointwiseConv2d { filters: last_width })];
        head.extend(depthwise_head(&ee, classes));
        exits.push(ExitSpec {
            name: ee,
            attach_after: loc.clone(),
            kind: ExitKind::EarlyExit,
            head,
            partner: Some(format!("ev{}", k + 1)),
        });
    }
    for k in 0..locations.len() {
        let ev = format!("ev{}", k + 1);
        exits.push(ExitSpec {
            name: ev.clone(),
            attach_after: last.clone(),
            kind: ExitKind::EarlyView,
            head: depthwise_head(&ev, classes),
            partner: Some(format!("ee{}", k + 1)),
        });
    }
    exits.push(final_exit(trunk, classes));
    Ok(GraphSpec {
        input,
        classes,
        trunk: trunk.to_vec(),
        exits,
        deployed: false,
    })
}

/// Trunk with K auxiliary exits (`aux1..auxK`) carrying their own hidden
/// dense layer, plus the final exit. `hidden == 0` drops the hidden layer.
pub fn ee_ensemble_spec(trunk: &[BlockSpec], input: [usize; 3], classes: usize, locations: &[String], hidden: usize) -> Result<GraphSpec> {
    check_locations(trunk, locations)?;
    let mut exits = Vec::new();
    for (k, loc) in locations.iter().enumerate() {
        let name = format!("aux{}", k + 1);
        let mut head = vec![BlockSpec::new(format!("{name}/gap"), LayerKind::GlobalAvgPool)];
        if hidden > 0 {
            head.push(BlockSpec::new(format!("{name}/hidden"), LayerKind::Dense { units: hidden }));
            head.push(BlockSpec::new(format!("{name}/relu"), LayerKind::Relu));
        }
        head.push(BlockSpec::new(format!("{name}/dense"), LayerKind::Dense { units: classes }));
        exits.push(ExitSpec {
            name,
            attach_after: loc.clone(),
            kind: ExitKind::Auxiliary,
            head,
            partner: None,
        });
    }
    exits.push(final_exit(trunk, classes));
    Ok(GraphSpec {
        input,
        classes,
        trunk: trunk.to_vec(),
        exits,
        deployed: false,
    })
}

/// Base graph with a dropout block inserted directly after each location.
pub fn dropout_spec(trunk: &[BlockSpec], input: [usize; 3], classes: usize, locations: &[String], rate: f32) -> Result<GraphSpec> {
    check_locations(trunk, locations)?;
    let mut with_dropout = Vec::with_capacity(trunk.len() + locations.len());
    for b in trunk {
        with_dropout.push(b.clone());
        if let Some(k) = locations.iter().position(|l| l == &b.name) {
            with_dropout.push(BlockSpec::new(format!("dropout{}", k + 1), LayerKind::Dropout { rate }));
        }
    }
    Ok(base_spec(&with_dropout, input, classes))
}

/// Channel count of the trunk output.
fn trunk_width(trunk: &[BlockSpec], input: [usize; 3]) -> usize {
    trunk.iter().fold(input[0], |c, b| match b.kind {
        LayerKind::Conv2d { filters, .. } | LayerKind::PointwiseConv2d { filters } => filters,
        LayerKind::Dense { units } => units,
        _ => c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::tensor::Rng;

    #[test]
    fn layer_ends_cover_pools() {
        let trunk = cnn4(&Cnn4Config::mnist());
        assert_eq!(layer_ends(&trunk), ["pool1", "pool2", "relu3", "relu4"]);
    }

    #[test]
    fn qute_spec_has_five_exits_for_two_locations() {
        let trunk = cnn4(&Cnn4Config::mnist());
        let locs = [after_layer(&trunk, 1).unwrap(), after_layer(&trunk, 2).unwrap()];
        let g = build_graph(qute_spec(&trunk, [1, 28, 28], 10, &locs).unwrap(), &mut Rng::new(0, 0)).unwrap();
        let names: Vec<_> = g.spec().exits.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["ee1", "ee2", "ev1", "ev2", "final"]);
        assert_eq!(g.depth(), 4);
        assert_eq!(g.depth_index("pool1"), Some(1));
        assert_eq!(g.depth_index("pool2"), Some(2));
    }

    #[test]
    fn one_location_gives_three_exits() {
        let trunk = cnn4(&Cnn4Config::mnist());
        let spec = qute_spec(&trunk, [1, 28, 28], 10, &[after_layer(&trunk, 2).unwrap()]).unwrap();
        assert_eq!(spec.exits.len(), 3);
    }

    #[test]
    fn location_errors() {
        let trunk = cnn4(&Cnn4Config::mnist());
        let l1 = after_layer(&trunk, 1).unwrap();
        let l2 = after_layer(&trunk, 2).unwrap();
        let l3 = after_layer(&trunk, 3).unwrap();
        assert!(qute_spec(&trunk, [1, 28, 28], 10, &[l2.clone(), l1.clone()]).is_err());
        assert!(qute_spec(&trunk, [1, 28, 28], 10, &[l1.clone(), l1.clone()]).is_err());
        assert!(qute_spec(&trunk, [1, 28, 28], 10, &[l1.clone(), l2.clone(), l3.clone(), "relu4".into()]).is_err());
        assert!(qute_spec(&trunk, [1, 28, 28], 10, &[l1, l2, l3]).is_ok());
        assert!(after_layer(&trunk, 0).is_err());
        assert!(after_layer(&trunk, 5).is_err());
    }

    #[test]
    fn dropout_spec_inserts_after_locations() {
        let trunk = cnn4(&Cnn4Config::mnist());
        let spec = dropout_spec(&trunk, [1, 28, 28], 10, &["pool1".into(), "pool2".into()], 0.1).unwrap();
        let names: Vec<_> = spec.trunk.iter().map(|b| b.name.as_str()).collect();
        assert_eq!(&names[..5], ["conv1", "relu1", "pool1", "dropout1", "conv2"]);
        assert!(names.contains(&"dropout2"));
    }
}
