//! Parameter and FLOP accounting.
//!
//! FLOPs are 2 × multiply-accumulates of conv, depthwise and dense layers
//! for one sample. Bias adds, activations and pooling are not counted.

use super::{ExitKind, ExitSpec, LayerKind, NetworkGraph};

impl NetworkGraph {
    /// Exits that survive inference stripping. When early-view exits exist
    /// the early exits and the final exit are dropped.
    pub fn is_deployed_exit(&self, exit: &ExitSpec) -> bool {
        let has_ev = self.spec.exits.iter().any(|e| e.kind == ExitKind::EarlyView);
        match exit.kind {
            ExitKind::EarlyExit => false,
            ExitKind::Final => !has_ev,
            ExitKind::EarlyView | ExitKind::Auxiliary => true,
        }
    }

    fn counted_blocks(&self, deployed_only: bool) -> impl Iterator<Item = &str> {
        let trunk = self.spec.trunk.iter().map(|b| b.name.as_str());
        let heads = self
            .spec
            .exits
            .iter()
            .filter(move |e| !deployed_only || self.is_deployed_exit(e))
            .flat_map(|e| e.head.iter().map(|b| b.name.as_str()));
        trunk.chain(heads)
    }

    pub fn param_count(&self, deployed_only: bool) -> usize {
        self.counted_blocks(deployed_only)
            .filter_map(|name| self.block_params(name))
            .map(|(w, b)| self.params.get(w).numel() + self.params.get(b).numel())
            .sum()
    }

    /// Parameters in one exit's head.
    pub fn exit_param_count(&self, exit: &str) -> usize {
        self.exit(exit)
            .map(|e| {
                e.head
                    .iter()
                    .filter_map(|b| self.block_params(&b.name))
                    .map(|(w, b)| self.params.get(w).numel() + self.params.get(b).numel())
                    .sum()
            })
            .unwrap_or(0)
    }

    pub fn flops_estimate(&self, deployed_only: bool) -> usize {
        self.counted_blocks(deployed_only)
            .map(|name| {
                let c = &self.blocks[name];
                let out: usize = c.out_shape.iter().product();
                let macs_per_out = match c.kind {
                    LayerKind::Conv2d { .. } | LayerKind::PointwiseConv2d { .. } | LayerKind::DepthwiseConv2d { .. } | LayerKind::Dense { .. } => {
                        let (w, _) = c.params.expect("weighted block");
                        let wshape = self.params.get(w).value.shape();
                        match c.kind {
                            LayerKind::Dense { .. } => wshape[0],
                            _ => wshape[1] * wshape[2] * wshape[3],
                        }
                    }
                    _ => 0,
                };
                2 * out * macs_per_out
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::presets::{self, cnn4, Cnn4Config};
    use crate::graph::*;
    use crate::tensor::Rng;

    #[test]
    fn dense_closed_form() {
        let spec = GraphSpec {
            input: [10, 1, 1],
            classes: 10,
            trunk: vec![BlockSpec::new("d", LayerKind::Dense { units: 10 })],
            exits: vec![ExitSpec {
                name: "final".into(),
                attach_after: "d".into(),
                kind: ExitKind::Final,
                head: vec![BlockSpec::new("id", LayerKind::Relu)],
                partner: None,
            }],
            deployed: false,
        };
        let g = build_graph(spec, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(g.param_count(false), 110);
        assert_eq!(g.flops_estimate(false), 200);
    }

    #[test]
    fn conv_flops_closed_form() {
        // 1→2 channels, 3×3 same on 4×4: 2·16 outputs × 9 MACs; the final
        // head pools to 2 features before dense(2).
        let trunk = vec![BlockSpec::new(
            "c",
            LayerKind::Conv2d {
                filters: 2,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
        )];
        let spec = presets::base_spec(&trunk, [1, 4, 4], 2);
        let g = build_graph(spec, &mut Rng::new(0, 0)).unwrap();
        let dense_macs = 2 * 2;
        assert_eq!(g.flops_estimate(false), 2 * (32 * 9 + dense_macs));
        assert_eq!(g.param_count(false), 2 * 9 + 2 + 2 * 2 + 2);
    }

    #[test]
    fn deployed_qute_is_base_plus_ev_heads() {
        let trunk = cnn4(&Cnn4Config::mnist());
        let locs = [presets::after_layer(&trunk, 1).unwrap(), presets::after_layer(&trunk, 2).unwrap()];
        let q = build_graph(presets::qute_spec(&trunk, [1, 28, 28], 10, &locs).unwrap(), &mut Rng::new(0, 0)).unwrap();
        let base = build_graph(presets::base_spec(&trunk, [1, 28, 28], 10), &mut Rng::new(0, 0)).unwrap();
        let base_trunk = base.param_count(false) - base.exit_param_count("final");
        let ev = q.exit_param_count("ev1");
        assert_eq!(ev, q.exit_param_count("ev2"));
        assert_eq!(q.param_count(true), base_trunk + 2 * ev);
        assert!(q.param_count(true) < q.param_count(false));
        assert!(q.flops_estimate(true) < q.flops_estimate(false));
    }
}
