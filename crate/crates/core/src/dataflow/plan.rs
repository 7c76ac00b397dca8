use alloc::format;
use alloc::vec::Vec;

use crate::engines::{layer_stats, Engine, LANES};
use crate::model::{LayerDesc, LayerKind, PreparedModel};
use crate::{Error, Result};

/// Parameter bytes an engine slot must hold for its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EngineLoad {
    pub weight_bytes: u64,
    pub bias_bytes: u64,
}

impl EngineLoad {
    pub fn total(&self) -> u64 {
        self.weight_bytes + self.bias_bytes
    }

    fn of(layer: &LayerDesc) -> Result<Self> {
        let Some(f) = &layer.filters else { return Ok(EngineLoad::default()) };
        let total = layer_stats(layer)?.weight_bytes;
        let weight_bytes = f.weights.len() as u64;
        Ok(EngineLoad { weight_bytes, bias_bytes: total - weight_bytes })
    }
}

/// One trip around the engine ring.
///
/// Slot fields hold layer indices into the prepared model. Round `k` runs the
/// depthwise, projection and addition of block `k` followed by the expansion
/// of block `k + 1`; round 0 also carries the entry convolution. The
/// trailing round runs average pooling on DWC and the classifier on PRO.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoundPlan {
    pub round_index: usize,
    pub trailing: bool,
    pub c2d: Option<usize>,
    pub dwc: Option<usize>,
    pub pro: Option<usize>,
    pub add: Option<usize>,
    pub exp: Option<usize>,
    /// Whether the ADD slot adds a shortcut (otherwise it passes through).
    pub residual: bool,
    /// Whether this round's ADD output is replayed by the next round.
    pub feeds_shortcut: bool,
    pub c2d_load: EngineLoad,
    pub dwc_load: EngineLoad,
    pub pro_load: EngineLoad,
    pub exp_load: EngineLoad,
}

impl RoundPlan {
    fn new(round_index: usize) -> Self {
        RoundPlan { round_index, ..RoundPlan::default() }
    }

    /// Layer index assigned to an engine, if any.
    pub fn slot(&self, engine: Engine) -> Option<usize> {
        match engine {
            Engine::C2d => self.c2d,
            Engine::Dwc => self.dwc,
            Engine::Pro => self.pro,
            Engine::Add => self.add,
            Engine::Exp => self.exp,
        }
    }

    /// Bytes of PRO and EXP parameters streamed in while DWC runs.
    pub fn stage2_load_bytes(&self) -> u64 {
        self.pro_load.total() + self.exp_load.total()
    }

    /// Every (engine, layer) pair of the round in ring order.
    pub fn assignments(&self) -> Vec<(Engine, usize)> {
        [Engine::C2d, Engine::Dwc, Engine::Pro, Engine::Add, Engine::Exp]
            .into_iter()
            .filter_map(|e| self.slot(e).map(|i| (e, i)))
            .collect()
    }
}

fn occupied(slot: Option<usize>, what: &str, layer: &LayerDesc, round: usize) -> Result<()> {
    if slot.is_some() {
        return Err(Error::Plan(format!(
            "layer {} needs the {what} slot of round {round}, which is taken",
            layer.name
        )));
    }
    Ok(())
}

/// Maps the layers of a prepared model onto engine rounds.
pub fn schedule_rounds(model: &PreparedModel) -> Result<Vec<RoundPlan>> {
    let graph = &model.graph;
    let mut rounds: Vec<RoundPlan> = Vec::new();
    let mut entry: Option<usize> = None;
    for (i, layer) in graph.layers.iter().enumerate() {
        let load = EngineLoad::of(layer)?;
        if layer.kind == LayerKind::C2d {
            if entry.is_some() || !rounds.is_empty() {
                return Err(Error::Plan(format!("layer {} is a second or late entry convolution", layer.name)));
            }
            entry = Some(i);
            continue;
        }
        if matches!(layer.kind, LayerKind::Dwc | LayerKind::AvgPool) {
            if rounds.last().is_some_and(|r| r.trailing) {
                return Err(Error::Plan(format!("layer {} follows the trailing round", layer.name)));
            }
            let mut r = RoundPlan::new(rounds.len());
            r.dwc = Some(i);
            r.dwc_load = load;
            r.trailing = layer.kind == LayerKind::AvgPool;
            if rounds.is_empty() {
                r.c2d = entry;
                if let Some(e) = entry {
                    r.c2d_load = EngineLoad::of(&graph.layers[e])?;
                }
            }
            rounds.push(r);
            continue;
        }
        let Some(r) = rounds.last_mut() else {
            return Err(Error::Plan(format!(
                "{} layer {} comes before the first depthwise layer",
                layer.kind, layer.name
            )));
        };
        let round = r.round_index;
        match layer.kind {
            LayerKind::Pro => {
                occupied(r.pro, "PRO", layer, round)?;
                r.pro = Some(i);
                r.pro_load = load;
            }
            LayerKind::Add => {
                occupied(r.add, "ADD", layer, round)?;
                if r.pro.is_none() || r.trailing {
                    return Err(Error::Plan(format!("ADD layer {} has no projection before it", layer.name)));
                }
                r.add = Some(i);
                r.residual = layer.residual;
            }
            LayerKind::Exp => {
                occupied(r.exp, "EXP", layer, round)?;
                if r.trailing {
                    return Err(Error::Plan(format!("EXP layer {} in the trailing round", layer.name)));
                }
                r.exp = Some(i);
                r.exp_load = load;
            }
            _ => unreachable!("handled above"),
        }
    }
    if rounds.is_empty() {
        return Err(Error::Plan("model has no depthwise layer".into()));
    }
    for r in &rounds {
        if !r.trailing && (r.pro.is_none() || r.add.is_none()) {
            return Err(Error::Plan(format!("round {} is missing its projection or addition", r.round_index)));
        }
    }
    // Shortcuts may only reach back one round, through the residual FIFO.
    for k in 0..rounds.len() {
        let Some(add) = rounds[k].add else { continue };
        if !rounds[k].residual {
            continue;
        }
        let source = graph.shortcut_into(add).map(|s| s.source);
        let previous = k.checked_sub(1).and_then(|p| rounds[p].add);
        if source.is_none() || source != previous {
            return Err(Error::Plan(format!(
                "shortcut into layer {} does not come from the previous round's ADD",
                graph.layers[add].name
            )));
        }
        rounds[k - 1].feeds_shortcut = true;
    }
    Ok(rounds)
}

/// Residual FIFO size in batches: the largest projection output frame.
pub fn residual_fifo_capacity(model: &PreparedModel) -> usize {
    model
        .graph
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::Pro)
        .map(|l| l.output.pixels() * l.output.channels.div_ceil(LANES))
        .max()
        .unwrap_or(0)
        .max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, prepare, Topology};
    use crate::quant::Rounding;

    #[test]
    fn tiny_model_rounds() {
        let g = build_model(&Topology::tiny(16), 3).unwrap();
        let m = prepare(&g, Rounding::Nearest).unwrap();
        let plan = schedule_rounds(&m).unwrap();
        assert_eq!(plan.len(), 6);
        assert!(plan[0].c2d.is_some());
        assert!(plan.iter().skip(1).all(|r| r.c2d.is_none()));
        assert!(plan[5].trailing);
        for r in &plan {
            for (e, i) in r.assignments() {
                assert_eq!(Engine::for_kind(m.graph.layers[i].kind), e);
            }
        }
        // blocks 2 and 3 have residuals fed by the round before
        assert!(plan[2].residual && plan[1].feeds_shortcut);
    }

    #[test]
    fn exp_before_dwc_is_rejected() {
        let g = build_model(&Topology::tiny(16), 3).unwrap();
        let mut m = prepare(&g, Rounding::Nearest).unwrap();
        // move the first EXP ahead of every depthwise layer
        let exp = m.graph.layers.iter().position(|l| l.kind == LayerKind::Exp).unwrap();
        let layer = m.graph.layers.remove(exp);
        m.graph.layers.insert(1, layer);
        assert!(matches!(schedule_rounds(&m), Err(Error::Plan(_))));
    }
}
