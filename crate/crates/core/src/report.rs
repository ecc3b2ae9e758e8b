//! Rank-distribution and parameter-budget reports, heatmap export and the
//! prune-log replay used to cross-check them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::adapters::{
    count_params, enumerated_count, AdapterKind, AdapterPlan, AdapterSet, ParamCount,
};
use crate::allocator::PruneEvent;
use crate::error::{Error, Result};
use crate::qformer::{QFormerConfig, SublayerAddress, SublayerGroup};
use crate::scalar::Real;

pub const CSV_HEADER: &str = "layer,self_attn,cross_attn,ffn";

/// Mean final rank per sublayer group of one layer; `None` marks a cell
/// with no adapted matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRanks {
    pub layer: usize,
    pub self_attn: Option<f64>,
    pub cross_attn: Option<f64>,
    pub ffn: Option<f64>,
}

impl LayerRanks {
    pub fn cell(&self, group: SublayerGroup) -> Option<f64> {
        match group {
            SublayerGroup::SelfAttn => self.self_attn,
            SublayerGroup::CrossAttn => self.cross_attn,
            SublayerGroup::Ffn => self.ffn,
        }
    }

    fn cells(&self) -> [Option<f64>; 3] {
        [self.self_attn, self.cross_attn, self.ffn]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRank {
    pub address: SublayerAddress,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankDistributionReport {
    pub layers: Vec<LayerRanks>,
    /// Per-matrix ranks in address order.
    pub detail: Vec<MatrixRank>,
}

impl RankDistributionReport {
    /// Groups per-matrix ranks into per-layer means. Layers with no
    /// adapters still get a row of absent cells.
    pub fn from_detail(num_layers: usize, mut detail: Vec<MatrixRank>) -> Result<Self> {
        detail.sort_by_key(|m| m.address);
        let mut sums: BTreeMap<(usize, SublayerGroup), (usize, usize)> = BTreeMap::new();
        for m in &detail {
            let layer = m.address.layer();
            if layer > num_layers {
                return Err(Error::Config(format!(
                    "{} is outside a {num_layers}-layer model",
                    m.address
                )));
            }
            let e = sums.entry((layer, m.address.group())).or_insert((0, 0));
            e.0 += m.rank;
            e.1 += 1;
        }
        let mean = |l, g| sums.get(&(l, g)).map(|&(s, n)| s as f64 / n as f64);
        let layers = (1..=num_layers)
            .map(|l| LayerRanks {
                layer: l,
                self_attn: mean(l, SublayerGroup::SelfAttn),
                cross_attn: mean(l, SublayerGroup::CrossAttn),
                ffn: mean(l, SublayerGroup::Ffn),
            })
            .collect();
        Ok(Self { layers, detail })
    }

    /// Mean over all present cells of `group`.
    pub fn group_mean(&self, group: SublayerGroup) -> Option<f64> {
        let v: Vec<f64> = self.layers.iter().filter_map(|l| l.cell(group)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean over the matrices of `group`, weighting every matrix equally.
    pub fn matrix_mean(&self, group: SublayerGroup) -> Option<f64> {
        let v: Vec<usize> = self
            .detail
            .iter()
            .filter(|m| m.address.group() == group)
            .map(|m| m.rank)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<usize>() as f64 / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.layers {
            let cells: Vec<String> = row
                .cells()
                .iter()
                .map(|c| c.map(|v| format!("{v:.4}")).unwrap_or_default())
                .collect();
            writeln!(out, "{},{}", row.layer, cells.join(",")).unwrap();
        }
        out
    }

    pub fn detail_csv(&self) -> String {
        let mut out = String::from("address,rank\n");
        for m in &self.detail {
            writeln!(out, "{},{}", m.address, m.rank).unwrap();
        }
        out
    }

    pub fn to_svg(&self) -> String {
        render_svg(&self.layers)
    }
}

/// Parses heatmap CSV back into rows.
pub fn parse_csv(text: &str) -> Result<Vec<LayerRanks>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse(format!("heatmap CSV must start with {CSV_HEADER:?}")));
    }
    let cell = |s: &str, n: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|_| Error::Parse(format!("line {n}: bad rank {s:?}")))
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let n = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("line {n}: expected 4 fields")));
            }
            Ok(LayerRanks {
                layer: f[0]
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {n}: bad layer {:?}", f[0])))?,
                self_attn: cell(f[1], n)?,
                cross_attn: cell(f[2], n)?,
                ffn: cell(f[3], n)?,
            })
        })
        .collect()
}

/// Final active ranks of an SVD-form adapter set.
pub fn collect_final_ranks<T: Real>(
    set: &AdapterSet<T>,
    config: &QFormerConfig,
) -> Result<RankDistributionReport> {
    if set.kind() != AdapterKind::AdaLora {
        return Err(Error::Config("no adaptive ranks: LoRA ranks are static".into()));
    }
    let detail = set
        .adapters()
        .iter()
        .map(|a| MatrixRank {
            address: a.target(),
            rank: a.active_rank(),
        })
        .collect();
    RankDistributionReport::from_detail(config.num_layers, detail)
}

/// Rebuilds final ranks from initial ranks and the prune-event log alone.
pub fn replay_prune_log(
    config: &QFormerConfig,
    initial: &[MatrixRank],
    events: &[PruneEvent],
) -> Result<RankDistributionReport> {
    let mut pruned: BTreeMap<SublayerAddress, BTreeSet<usize>> =
        initial.iter().map(|m| (m.address, BTreeSet::new())).collect();
    let r_init: BTreeMap<_, _> = initial.iter().map(|m| (m.address, m.rank)).collect();
    for e in events {
        let set = pruned
            .get_mut(&e.address)
            .ok_or_else(|| Error::State(format!("prune event for unknown adapter {}", e.address)))?;
        if e.index >= r_init[&e.address] || !set.insert(e.index) {
            return Err(Error::State(format!(
                "invalid prune of {} index {} at step {}",
                e.address, e.index, e.step
            )));
        }
    }
    let detail = pruned
        .iter()
        .map(|(a, p)| MatrixRank {
            address: *a,
            rank: r_init[a] - p.len(),
        })
        .collect();
    RankDistributionReport::from_detail(config.num_layers, detail)
}

/// Checks that after every pruning step the total active rank equals the
/// logged budget.
pub fn check_budget_log(initial_total: usize, events: &[PruneEvent]) -> Result<()> {
    let mut active = initial_total;
    let mut by_step: BTreeMap<usize, Vec<&PruneEvent>> = BTreeMap::new();
    for e in events {
        by_step.entry(e.step).or_default().push(e);
    }
    for (step, evs) in by_step {
        active = active.checked_sub(evs.len()).ok_or_else(|| {
            Error::State(format!("step {step} prunes more triplets than are active"))
        })?;
        if evs.iter().any(|e| e.budget != active) {
            return Err(Error::State(format!(
                "step {step}: active rank {active} differs from logged budget {}",
                evs[0].budget
            )));
        }
    }
    Ok(())
}

pub const PALETTE: [&str; 9] = [
    "#f7fbff", "#deebf7", "#c6dbef", "#9ecae1", "#6baed6", "#4292c6", "#2171b5", "#08519c",
    "#08306b",
];

/// Palette index for `v` on a min-max scale; all-equal values map to 0.
pub fn color_bucket(v: f64, min: f64, max: f64) -> usize {
    if max <= min {
        return 0;
    }
    (((v - min) / (max - min) * PALETTE.len() as f64) as usize).min(PALETTE.len() - 1)
}

/// SVG heatmap of `rows` on a min-max color scale; absent cells are hatched.
pub fn render_svg(rows: &[LayerRanks]) -> String {
    const CELL_W: usize = 90;
    const CELL_H: usize = 28;
    const LEFT: usize = 50;
    const TOP: usize = 30;
    let values: Vec<f64> = rows.iter().flat_map(|r| r.cells()).flatten().collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = LEFT + 3 * CELL_W + 10;
    let height = TOP + rows.len() * CELL_H + 10;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    s.push_str(concat!(
        r#"<defs><pattern id="absent" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)">"#,
        r##"<rect width="6" height="6" fill="#ffffff"/><line x1="0" y1="0" x2="0" y2="6" stroke="#999999" stroke-width="2"/>"##,
        "</pattern></defs>\n"
    ));
    for (c, g) in SublayerGroup::ALL.iter().enumerate() {
        let x = LEFT + c * CELL_W + CELL_W / 2;
        writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, TOP - 10, g.as_str()).unwrap();
    }
    for (r, row) in rows.iter().enumerate() {
        let y = TOP + r * CELL_H;
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">L{:02}</text>"#,
            LEFT - 6,
            y + CELL_H / 2 + 4,
            row.layer
        )
        .unwrap();
        for (c, cell) in row.cells().iter().enumerate() {
            let x = LEFT + c * CELL_W;
            match cell {
                Some(v) => {
                    let b = color_bucket(*v, min, max);
                    let ink = if b >= 5 { "#ffffff" } else { "#000000" };
                    writeln!(
                        s,
                        r##"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{}" stroke="#ffffff" data-bucket="{b}"/>"##,
                        PALETTE[b]
                    )
                    .unwrap();
                    writeln!(
                        s,
                        r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v:.2}</text>"#,
                        x + CELL_W / 2,
                        y + CELL_H / 2 + 4
                    )
                    .unwrap();
                }
                None => writeln!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="url(#absent)" stroke="#ffffff" data-absent="true"/>"##
                )
                .unwrap(),
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Trainable-parameter budget of one adapter configuration, checked
/// against an element-by-element enumeration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBudgetReport {
    pub kind: Option<AdapterKind>,
    pub spec: Option<String>,
    pub rank: Option<usize>,
    #[serde(flatten)]
    pub count: ParamCount,
}

impl ParamBudgetReport {
    pub fn full_finetune(config: &QFormerConfig) -> Self {
        Self {
            kind: None,
            spec: None,
            rank: None,
            count: count_params(config, None),
        }
    }

    pub fn new(config: &QFormerConfig, plan: &AdapterPlan) -> Result<Self> {
        let count = count_params(config, Some(plan));
        let enumerated = enumerated_count(config, plan)?;
        if count != enumerated {
            return Err(Error::State(format!(
                "closed-form count {} disagrees with enumeration {}",
                count.trainable, enumerated.trainable
            )));
        }
        Ok(Self {
            kind: Some(plan.kind),
            spec: Some(plan.spec.to_string()),
            rank: Some(plan.rank),
            count,
        })
    }
}

impl fmt::Display for ParamBudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, &self.spec, self.rank) {
            (Some(k), Some(s), Some(r)) => writeln!(f, "{} spec={s} r={r}", k.as_str())?,
            _ => writeln!(f, "full fine-tuning")?,
        }
        writeln!(f, "base parameters:      {}", self.count.base_total)?;
        writeln!(f, "trainable parameters: {}", self.count.trainable)?;
        writeln!(f, "fraction:             {:.6}", self.count.fraction)?;
        for (g, n) in &self.count.by_group {
            writeln!(f, "  {:<10} {n}", g.as_str())?;
        }
        Ok(())
    }
}
