//! Deterministic cycle-level simulator of the layer-wise token pipeline.
//!
//! Every layer is a pipeline stage holding at most one token. A stage accepts
//! a token when its predecessor presents one and it is empty, processes it
//! for a fixed number of cycles, then waits (stalled) until the successor is
//! ready. Tokens move strictly in order; time advances in whole cycles; the
//! same inputs always produce the same report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mamba::MambaConfig;

/// Cycles one range-normalization compute unit spends per element batch:
/// 2 to form the mean and range, 23 for the divide/multiply/shift pipeline.
pub const RANGE_NORM_CYCLES_PER_ELEMENT: u64 = 25;

/// Cycles per token for a range-normalization stage with `units` parallel
/// compute units over a `dim`-element token: `25 * ceil(dim / units)`.
/// The unit count must divide the dimension for a uniform workload split.
pub fn range_norm_latency(dim: usize, units: usize) -> Result<u64> {
    if units == 0 || dim % units != 0 {
        return Err(Error::Config(format!(
            "{units} compute units do not divide token dimension {dim}"
        )));
    }
    Ok(RANGE_NORM_CYCLES_PER_ELEMENT * dim.div_ceil(units) as u64)
}

// ---------------------------------------------------------------------------
// stage tables and presets

/// How one stage's per-token cycle count is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageCost {
    /// Constant cycles per token.
    Fixed { cycles: u64 },
    /// Range-normalization unit model: `cycles_per_element * ceil(D / units)`.
    PerElement { cycles_per_element: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    #[serde(flatten)]
    pub cost: StageCost,
}

/// Ordered stage-latency template: stages before the blocks, the per-block
/// stage list (instantiated M times), and the stages after.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLatencyTable {
    pub name: String,
    /// Interpretation note carried with the preset file.
    #[serde(default)]
    pub notes: String,
    pub pre: Vec<StageSpec>,
    pub block: Vec<StageSpec>,
    pub post: Vec<StageSpec>,
}

pub const EMAMBA_PRESET_JSON: &str = include_str!("../presets/emamba.json");
pub const NAIVE_PRESET_JSON: &str = include_str!("../presets/naive-mamba.json");

impl StageLatencyTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let table: StageLatencyTable = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }

    /// The frozen accelerated-pipeline preset.
    pub fn emamba() -> Self {
        Self::from_json(EMAMBA_PRESET_JSON).expect("embedded preset parses")
    }

    /// The frozen baseline preset with the high-latency normalization and
    /// shift-based exponential stages.
    pub fn naive_mamba() -> Self {
        Self::from_json(NAIVE_PRESET_JSON).expect("embedded preset parses")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "emamba" => Ok(Self::emamba()),
            "naive" | "naive-mamba" => Ok(Self::naive_mamba()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected emamba or naive-mamba)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.pre.iter().chain(&self.block).chain(&self.post) {
            let floor = match s.cost {
                StageCost::Fixed { cycles } => cycles,
                StageCost::PerElement { cycles_per_element } => cycles_per_element,
            };
            if floor == 0 {
                return Err(Error::Config(format!("stage {} has zero latency", s.name)));
            }
        }
        if self.pre.is_empty() && self.block.is_empty() && self.post.is_empty() {
            return Err(Error::Config("stage table is empty".into()));
        }
        Ok(())
    }

    /// Instantiates the flat stage list for a pipeline configuration.
    pub fn instantiate(&self, config: &PipelineConfig) -> Result<Vec<Stage>> {
        self.validate()?;
        config.validate()?;
        let mut stages = Vec::new();
        let mut push = |spec: &StageSpec, tag: Option<usize>| -> Result<()> {
            let cycles = match spec.cost {
                StageCost::Fixed { cycles } => cycles,
                StageCost::PerElement { cycles_per_element } => {
                    cycles_per_element * (config.token_dim / config.units) as u64
                }
            };
            let name = match tag {
                Some(i) => format!("block{i}.{}", spec.name),
                None => spec.name.clone(),
            };
            stages.push(Stage {
                name,
                cycles_per_token: cycles,
            });
            Ok(())
        };
        for s in &self.pre {
            push(s, None)?;
        }
        for i in 0..config.num_blocks {
            for s in &self.block {
                push(s, Some(i))?;
            }
        }
        for s in &self.post {
            push(s, None)?;
        }
        Ok(stages)
    }
}

/// One instantiated pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub cycles_per_token: u64,
}

/// Pipeline-level configuration: token geometry plus the clock and frame
/// size used for the throughput formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Token dimension D; the range-normalization workload splits over it.
    pub token_dim: usize,
    /// Range-normalization compute units; must divide `token_dim`.
    pub units: usize,
    /// Tokens per frame L.
    pub seq_len: usize,
    pub num_blocks: usize,
    pub clock_hz: f64,
    pub frame_input_bits: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config("token_dim and seq_len must be positive".into()));
        }
        if self.units == 0 || self.token_dim % self.units != 0 {
            return Err(Error::Config(format!(
                "{} compute units do not divide token dimension {}",
                self.units, self.token_dim
            )));
        }
        Ok(())
    }

    /// Derives the pipeline view of a model configuration.
    pub fn from_model(config: &MambaConfig, units: usize, clock_hz: f64) -> Self {
        PipelineConfig {
            token_dim: config.model_dim,
            units,
            seq_len: config.seq_len(),
            num_blocks: config.num_blocks,
            clock_hz,
            frame_input_bits: config.frame_input_bits(),
        }
    }

    /// The pose-estimation deployment point: D=20 tokens, 16 per frame,
    /// 2 blocks, 100 MHz.
    pub fn mars(units: usize) -> Self {
        Self::from_model(&MambaConfig::mars(), units, 100e6)
    }
}

// ---------------------------------------------------------------------------
// simulation

/// Per-stage cycle accounting over the simulated window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageProfile {
    pub name: String,
    pub cycles_per_token: u64,
    pub busy: u64,
    pub stall: u64,
    pub idle: u64,
}

/// Simulation result: frame latency, steady-state initiation interval, the
/// throughput formula output, and the per-stage busy/stall/idle profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub preset: String,
    pub units: usize,
    pub seq_len: usize,
    pub frame_latency_cycles: u64,
    /// Steady-state cycles between consecutive frame completions.
    pub initiation_interval_cycles: u64,
    /// Steady-state cycles between consecutive token completions.
    pub token_interval_cycles: u64,
    pub throughput_bits_per_s: f64,
    pub total_cycles: u64,
    pub stages: Vec<StageProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Empty,
    Busy { token: usize, remaining: u64 },
    Done { token: usize },
}

struct Pipeline {
    stages: Vec<Stage>,
    slots: Vec<Slot>,
    profile: Vec<StageProfile>,
    /// Completion cycle of each token that has left the last stage.
    completions: Vec<(usize, u64)>,
    next_token: usize,
    tokens_total: usize,
    now: u64,
}

impl Pipeline {
    fn new(stages: Vec<Stage>, tokens_total: usize) -> Self {
        let profile = stages
            .iter()
            .map(|s| StageProfile {
                name: s.name.clone(),
                cycles_per_token: s.cycles_per_token,
                busy: 0,
                stall: 0,
                idle: 0,
            })
            .collect();
        let slots = vec![Slot::Empty; stages.len()];
        Pipeline {
            stages,
            slots,
            profile,
            completions: Vec::new(),
            next_token: 0,
            tokens_total,
            now: 0,
        }
    }

    fn done(&self) -> bool {
        self.completions.len() == self.tokens_total
    }

    /// Advances one cycle: transfers (sink to source so freed slots chain),
    /// then processing.
    fn tick(&mut self) {
        let n = self.stages.len();
        // sink accepts unconditionally, in order
        if let Slot::Done { token } = self.slots[n - 1] {
            self.completions.push((token, self.now));
            self.slots[n - 1] = Slot::Empty;
        }
        for i in (1..n).rev() {
            if let (Slot::Done { token }, Slot::Empty) = (self.slots[i - 1], self.slots[i]) {
                self.slots[i] = Slot::Busy {
                    token,
                    remaining: self.stages[i].cycles_per_token,
                };
                self.slots[i - 1] = Slot::Empty;
            }
        }
        if self.slots[0] == Slot::Empty && self.next_token < self.tokens_total {
            self.slots[0] = Slot::Busy {
                token: self.next_token,
                remaining: self.stages[0].cycles_per_token,
            };
            self.next_token += 1;
        }
        // processing phase
        for i in 0..n {
            match self.slots[i] {
                Slot::Busy { token, remaining } => {
                    self.profile[i].busy += 1;
                    self.slots[i] = if remaining == 1 {
                        Slot::Done { token }
                    } else {
                        Slot::Busy {
                            token,
                            remaining: remaining - 1,
                        }
                    };
                }
                Slot::Done { .. } => self.profile[i].stall += 1,
                Slot::Empty => self.profile[i].idle += 1,
            }
        }
        self.now += 1;
    }
}

/// Frames simulated back to back to measure the steady-state interval.
const WARMUP_FRAMES: usize = 4;

/// Runs the token pipeline and reports latency, initiation interval, and the
/// per-stage profile. Deterministic: identical inputs give identical reports.
pub fn simulate(config: &PipelineConfig, table: &StageLatencyTable) -> Result<CycleReport> {
    let stages = table.instantiate(config)?;
    let l = config.seq_len;

    // first: a single frame for the latency number and the stage profile
    let mut single = Pipeline::new(stages.clone(), l);
    while !single.done() {
        single.tick();
    }
    let frame_latency = single.completions.last().unwrap().1;

    // then: several frames back to back for the steady-state intervals
    let mut multi = Pipeline::new(stages, l * WARMUP_FRAMES);
    while !multi.done() {
        multi.tick();
    }
    let frame_end = |f: usize| multi.completions[(f + 1) * l - 1].1;
    let initiation_interval = frame_end(WARMUP_FRAMES - 1) - frame_end(WARMUP_FRAMES - 2);
    let t = multi.completions.len();
    let token_interval = multi.completions[t - 1].1 - multi.completions[t - 2].1;

    // ordering is forced by the handshake; keep it checked anyway
    debug_assert!(single.completions.windows(2).all(|w| w[0].0 + 1 == w[1].0));

    Ok(CycleReport {
        preset: table.name.clone(),
        units: config.units,
        seq_len: l,
        frame_latency_cycles: frame_latency,
        initiation_interval_cycles: initiation_interval,
        token_interval_cycles: token_interval,
        throughput_bits_per_s: config.frame_input_bits as f64 * config.clock_hz
            / initiation_interval as f64,
        total_cycles: single.now,
        stages: single.profile,
    })
}

/// Runs the unit sweep: one report per compute-unit count.
pub fn sweep_units(
    config: &PipelineConfig,
    table: &StageLatencyTable,
    unit_list: &[usize],
) -> Result<Vec<(usize, CycleReport)>> {
    let mut out = Vec::with_capacity(unit_list.len());
    for &units in unit_list {
        let mut c = config.clone();
        c.units = units;
        out.push((units, simulate(&c, table)?));
    }
    Ok(out)
}

/// Side-by-side reports for the accelerated preset, the baseline, and the
/// baseline with only its normalization stage replaced by range norm.
pub fn compare_presets(config: &PipelineConfig) -> Result<Vec<CycleReport>> {
    let emamba = simulate(config, &StageLatencyTable::emamba())?;
    let naive = simulate(config, &StageLatencyTable::naive_mamba())?;
    let ablated = simulate(config, &range_norm_ablation())?;
    Ok(vec![emamba, naive, ablated])
}

/// The baseline table with its normalization stage swapped for the
/// range-normalization unit model; everything else stays baseline.
pub fn range_norm_ablation() -> StageLatencyTable {
    let mut table = StageLatencyTable::naive_mamba();
    let range_norm_stage = StageLatencyTable::emamba()
        .block
        .iter()
        .find(|s| matches!(s.cost, StageCost::PerElement { .. }))
        .expect("accelerated preset has a range-norm stage")
        .clone();
    for s in table.block.iter_mut() {
        if s.name == "norm" {
            *s = range_norm_stage.clone();
        }
    }
    table.name = "naive-mamba+range-norm".into();
    table
}

/// Plot-ready CSV for the unit-sweep curve.
pub fn sweep_csv(rows: &[(usize, CycleReport)]) -> String {
    let mut out = String::from(
        "units,norm_cycles_per_token,frame_latency_cycles,initiation_interval_cycles,throughput_bits_per_s\n",
    );
    for (units, r) in rows {
        let norm_cycles = r
            .stages
            .iter()
            .find(|s| s.name.contains("norm"))
            .map(|s| s.cycles_per_token)
            .unwrap_or(0);
        out.push_str(&format!(
            "{units},{norm_cycles},{},{},{}\n",
            r.frame_latency_cycles, r.initiation_interval_cycles, r.throughput_bits_per_s
        ));
    }
    out
}

/// Aligned-column text table of one or more reports.
pub fn report_table(reports: &[CycleReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>6} {:>14} {:>12} {:>14}\n",
        "preset", "units", "frame latency", "init intvl", "throughput"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<28} {:>6} {:>14} {:>12} {:>11.1} Mb/s\n",
            r.preset,
            r.units,
            r.frame_latency_cycles,
            r.initiation_interval_cycles,
            r.throughput_bits_per_s / 1e6
        ));
    }
    out
}
