//! The assembled model: an encoder CDE over the interpolated input path, a
//! decoder ODE producing the latent path `Y`, and the main CDE over `Y`
//! between trainable bounds, all solved as one stacked ODE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NdArray, Tape, Var};
use crate::error::{Error, Result, StageExt};
use crate::field::{FieldSpec, IntegrationBounds, MlpField, ParamStore, Role};
use crate::interp::{fit_spline, SplineOptions, SplinePath, TimeSeriesSample};
use crate::solve::{
    eval_plain, integrate_adjoint, integrate_on_tape, solve_system, AdjointPolicy, FnSystem, ParamField,
    SolverConfig, Trajectory,
};

/// Which bounds are trainable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMode {
    #[default]
    Exit,
    TerminalExit,
    FixedExit,
}

impl ExitMode {
    pub const ALL: [ExitMode; 3] = [ExitMode::FixedExit, ExitMode::TerminalExit, ExitMode::Exit];

    pub fn label(self) -> &'static str {
        match self {
            ExitMode::Exit => "EXIT",
            ExitMode::TerminalExit => "Terminal-EXIT",
            ExitMode::FixedExit => "Fixed-EXIT",
        }
    }

    pub fn trains_start(self) -> bool {
        self == ExitMode::Exit
    }

    pub fn trains_end(self) -> bool {
        self != ExitMode::FixedExit
    }
}

impl std::str::FromStr for ExitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exit" => Ok(ExitMode::Exit),
            "terminal_exit" => Ok(ExitMode::TerminalExit),
            "fixed_exit" => Ok(ExitMode::FixedExit),
            _ => Err(Error::config("mode", format!("unknown mode {s:?} (exit, terminal_exit, fixed_exit)"))),
        }
    }
}

/// Gradient route.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    #[default]
    Adjoint,
    Direct,
}

/// How the adjoint pass gets the forward state back.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateRecovery {
    #[default]
    Recompute,
    Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Raw value channels; 0 until inferred from data.
    pub input_channels: usize,
    pub time_channel: bool,
    pub observation_intensity: bool,
    pub encoder_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Number of encoder readouts concatenated into the input of φ_Y.
    pub n_enc: usize,
    /// 0 until inferred from the task.
    pub output_dim: usize,
    pub phi_e: FieldSpec,
    pub k: FieldSpec,
    pub phi_y: FieldSpec,
    pub phi_z: FieldSpec,
    pub f: FieldSpec,
    pub g: FieldSpec,
    pub output: FieldSpec,
    pub allow_any_activation: bool,
    pub solver: SolverConfig,
    pub state_recovery: StateRecovery,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_channels: 0,
            time_channel: true,
            observation_intensity: false,
            encoder_dim: 8,
            latent_dim: 8,
            hidden_dim: 8,
            n_enc: 5,
            output_dim: 0,
            phi_e: FieldSpec::default(),
            k: FieldSpec::new(&[16], None),
            phi_y: FieldSpec::default(),
            phi_z: FieldSpec::default(),
            f: FieldSpec::new(&[16], None),
            g: FieldSpec::new(&[16], None),
            output: FieldSpec::default(),
            allow_any_activation: false,
            solver: SolverConfig::default(),
            state_recovery: StateRecovery::Recompute,
        }
    }
}

impl ModelSpec {
    pub fn path_dim(&self) -> usize {
        self.input_channels * (1 + usize::from(self.observation_intensity)) + usize::from(self.time_channel)
    }

    pub fn spline_options(&self) -> SplineOptions {
        SplineOptions {
            time_channel: self.time_channel,
            observation_intensity: self.observation_intensity,
            ..Default::default()
        }
    }

    /// Build every field, checking widths and activations.
    pub fn build_fields(&self) -> Result<Fields> {
        for (name, v) in [
            ("model.input_channels", self.input_channels),
            ("model.encoder_dim", self.encoder_dim),
            ("model.latent_dim", self.latent_dim),
            ("model.hidden_dim", self.hidden_dim),
            ("model.n_enc", self.n_enc),
            ("model.output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        self.solver.validate()?;
        let p = self.path_dim();
        let any = self.allow_any_activation;
        let build = |role: Role, spec: &FieldSpec, input, rows, cols| {
            MlpField::build(role, input, rows, cols, spec, any)
                .map_err(|e| Error::config(format!("model.{}", role.prefix()), e.to_string()))
        };
        Ok(Fields {
            phi_e: build(Role::MapperPhiE, &self.phi_e, p, self.encoder_dim, 1)?,
            k: build(Role::CdeK, &self.k, self.encoder_dim, self.encoder_dim, p)?,
            phi_y: build(Role::MapperPhiY, &self.phi_y, self.n_enc * self.encoder_dim, self.latent_dim, 1)?,
            phi_z: build(Role::MapperPhiZ, &self.phi_z, p, self.hidden_dim, 1)?,
            f: build(Role::OdeF, &self.f, self.latent_dim + 1, self.latent_dim, 1)?,
            g: build(Role::CdeG, &self.g, self.hidden_dim, self.hidden_dim, self.latent_dim)?,
            output: build(Role::OutputHead, &self.output, self.hidden_dim, self.output_dim, 1)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fields {
    pub phi_e: MlpField,
    pub k: MlpField,
    pub phi_y: MlpField,
    pub phi_z: MlpField,
    pub f: MlpField,
    pub g: MlpField,
    pub output: MlpField,
}

impl Fields {
    pub fn get(&self, role: Role) -> &MlpField {
        match role {
            Role::MapperPhiE => &self.phi_e,
            Role::CdeK => &self.k,
            Role::MapperPhiY => &self.phi_y,
            Role::MapperPhiZ => &self.phi_z,
            Role::OdeF => &self.f,
            Role::CdeG => &self.g,
            Role::OutputHead => &self.output,
        }
    }
}

/// Samples that share one time grid, with their fitted paths.
#[derive(Clone, Debug)]
pub struct Batch {
    pub paths: Vec<SplinePath>,
    pub grid: Vec<f64>,
}

impl Batch {
    pub fn new(samples: &[&TimeSeriesSample], opts: &SplineOptions) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        if let Some(i) = samples.iter().position(|s| s.times != first.times) {
            return Err(Error::Input(format!("batch sample {i} has a different time grid")));
        }
        let paths = samples.iter().map(|s| fit_spline(s, opts)).collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            paths,
            grid: first.times.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn terminal(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    fn stack(&self, rows: impl Iterator<Item = Result<Vec<f64>>>) -> Result<NdArray> {
        let rows = rows.collect::<Result<Vec<_>>>()?;
        NdArray::from_rows(&rows)
    }

    /// `X(t)` for every sample, `[batch, path_dim]`.
    pub fn eval(&self, t: f64) -> Result<NdArray> {
        self.stack(self.paths.iter().map(|p| p.eval(t)))
    }

    pub fn eval_clamped(&self, t: f64) -> Result<NdArray> {
        self.stack(self.paths.iter().map(|p| Ok(p.eval_clamped(t))))
    }

    /// `dX/dt` for every sample, `[batch, path_dim]`.
    pub fn derivative(&self, t: f64) -> Result<NdArray> {
        self.stack(self.paths.iter().map(|p| p.derivative(t)))
    }
}

/// Training targets of one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// `[batch, output_dim]`.
    Values(NdArray),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cross-entropy (class targets) or mean squared error (value targets),
/// averaged over the batch and, for MSE, over elements.
pub fn record_task_loss(tape: &mut Tape, logits: Var, targets: &Targets) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape {
            op: "task loss",
            left: shape,
            right: vec![targets.len()],
        });
    }
    let (b, c) = (shape[0], shape[1]);
    match targets {
        Targets::Classes(classes) => {
            let mut mask = vec![0.0; b * c];
            for (i, &k) in classes.iter().enumerate() {
                if k >= c {
                    return Err(Error::Input(format!("class index {k} out of range for {c} outputs")));
                }
                mask[i * c + k] = 1.0;
            }
            let lp = tape.log_softmax(logits)?;
            let m = tape.constant(NdArray::new(vec![b, c], mask)?);
            let picked = tape.mul(lp, m)?;
            let s = tape.sum(picked)?;
            tape.scale(s, -1.0 / b as f64)
        }
        Targets::Values(v) => {
            let t = tape.constant(v.clone());
            let d = tape.sub(logits, t)?;
            let sq = tape.square(d)?;
            let s = tape.sum(sq)?;
            tape.scale(s, 1.0 / (b * c) as f64)
        }
    }
}

/// Objective settings that affect the loss value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    /// Kinetic regularization coefficient.
    pub c_kr: f64,
}

/// Loss value and its gradient with respect to every parameter and both bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub loss: f64,
    pub task_loss: f64,
    pub grads: ParamStore,
    pub d_tau_start: f64,
    pub d_tau_end: f64,
}

/// Stacked main dynamics `d[z;Y]/dt = [g(z)·f(Y,t) ; f(Y,t)]` with a single
/// evaluation of `f` shared by both blocks.
pub fn combined_dynamics(
    tape: &mut Tape,
    state: Var,
    t: f64,
    hidden_dim: usize,
    latent_dim: usize,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
    g: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let shape = tape.value(state).shape().to_vec();
    if shape.len() != 2 || shape[1] < hidden_dim + latent_dim {
        return Err(Error::Shape {
            op: "combined dynamics",
            left: shape,
            right: vec![hidden_dim + latent_dim],
        });
    }
    let b = shape[0];
    let z = tape.slice(state, 1, 0, hidden_dim)?;
    let y = tape.slice(state, 1, hidden_dim, latent_dim)?;
    let tcol = tape.constant(NdArray::full(&[b, 1], t));
    let fin = tape.concat(&[y, tcol], 1)?;
    let dy = f(tape, fin)?;
    let gz = g(tape, z)?;
    let dz = tape.bmv(gz, dy)?;
    tape.concat(&[dz, dy], 1)
}

/// Append `‖F‖²` per row as an extra column, for the kinetic integral.
fn with_kinetic(tape: &mut Tape, dynamics: Var) -> Result<Var> {
    let b = tape.value(dynamics).shape()[0];
    let sq = tape.square(dynamics)?;
    let s = tape.sum_last(sq)?;
    let q = tape.reshape(s, &[b, 1])?;
    tape.concat(&[dynamics, q], 1)
}

/// Encoder `e' = k(e)·dX/dt` plus kinetic column; state `[batch, enc + 1]`.
struct EncoderField<'a> {
    model: &'a ExitModel,
    batch: &'a Batch,
}

impl ParamField for EncoderField<'_> {
    fn params(&self) -> Vec<&NdArray> {
        self.model.field_params(Role::CdeK)
    }

    fn eval(&self, tape: &mut Tape, params: &[Var], t: f64, state: Var) -> Result<Var> {
        let enc = self.model.spec.encoder_dim;
        let e = tape.slice(state, 1, 0, enc)?;
        let m = self.model.fields.k.forward(tape, params, e)?;
        let dx = tape.constant(self.batch.derivative(t)?);
        let de = tape.bmv(m, dx)?;
        with_kinetic(tape, de)
    }
}

/// Main stacked system plus kinetic column; state `[batch, hidden + latent + 1]`.
struct MainField<'a> {
    model: &'a ExitModel,
}

impl ParamField for MainField<'_> {
    fn params(&self) -> Vec<&NdArray> {
        let mut p = self.model.field_params(Role::OdeF);
        p.extend(self.model.field_params(Role::CdeG));
        p
    }

    fn eval(&self, tape: &mut Tape, params: &[Var], t: f64, state: Var) -> Result<Var> {
        let fields = &self.model.fields;
        let nf = 2 * fields.f.layers.len();
        let (pf, pg) = params.split_at(nf);
        let d = combined_dynamics(
            tape,
            state,
            t,
            self.model.spec.hidden_dim,
            self.model.spec.latent_dim,
            |tape, x| fields.f.forward(tape, pf, x),
            |tape, z| fields.g.forward(tape, pg, z),
        )?;
        with_kinetic(tape, d)
    }
}

/// Parameter handles of every field on one tape.
struct Handles(Vec<Vec<Var>>);

impl Handles {
    fn get(&self, role: Role) -> &[Var] {
        &self.0[Role::ALL.iter().position(|&r| r == role).unwrap()]
    }
}

/// Forward values shared by the loss and gradient routines.
struct Forward {
    e_final: NdArray,
    readouts: Vec<NdArray>,
    x_start: NdArray,
    s0: NdArray,
    main: Trajectory,
    encoder: Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitModel {
    spec: ModelSpec,
    fields: Fields,
    params: ParamStore,
    bounds: IntegrationBounds,
    mode: ExitMode,
}

impl ExitModel {
    /// Fresh model with seeded parameters and bounds `(0, terminal)`.
    pub fn new(spec: ModelSpec, terminal: f64, mode: ExitMode, seed: u64) -> Result<Self> {
        if !(terminal > 0.0 && terminal.is_finite()) {
            return Err(Error::Input(format!("terminal time must be positive, got {terminal}")));
        }
        let fields = spec.build_fields()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for role in Role::ALL {
            for (name, v) in fields.get(role).init_params(&mut rng) {
                params.insert(name, v);
            }
        }
        Ok(ExitModel {
            spec,
            fields,
            params,
            bounds: IntegrationBounds::new(terminal),
            mode,
        })
    }

    /// Reassemble from stored parts, checking every parameter shape.
    pub fn from_parts(spec: ModelSpec, params: ParamStore, bounds: IntegrationBounds, mode: ExitMode) -> Result<Self> {
        let fields = spec.build_fields()?;
        let mut expected = 0;
        for role in Role::ALL {
            let field = fields.get(role);
            let arrays = params.field(field)?;
            for (i, l) in field.layers.iter().enumerate() {
                if arrays[2 * i].shape() != [l.input, l.output] || arrays[2 * i + 1].shape() != [l.output] {
                    return Err(Error::Checkpoint(format!("parameter shapes of {} layer {i} do not match the spec", role.prefix())));
                }
            }
            expected += arrays.len();
        }
        if expected != params.len() {
            return Err(Error::Checkpoint(format!("{} parameters stored, spec needs {expected}", params.len())));
        }
        if !bounds.is_feasible() || !(bounds.terminal > 0.0) {
            return Err(Error::Checkpoint(format!("infeasible bounds {bounds:?}")));
        }
        Ok(ExitModel {
            spec,
            fields,
            params,
            bounds,
            mode,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn fields(&self) -> &Fields {
        &self.fields
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bounds(&self) -> IntegrationBounds {
        self.bounds
    }

    /// Set the bounds and repair them with [`clamp_bounds`].
    pub fn set_bounds(&mut self, bounds: IntegrationBounds) {
        self.bounds = clamp_bounds(bounds, self.mode);
    }

    pub fn mode(&self) -> ExitMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: ExitMode) {
        self.mode = mode;
        self.bounds = clamp_bounds(self.bounds, mode);
    }

    fn field_params(&self, role: Role) -> Vec<&NdArray> {
        self.params.field(self.fields.get(role)).expect("model parameters match fields")
    }

    pub fn prepare(&self, samples: &[&TimeSeriesSample]) -> Result<Batch> {
        let batch = Batch::new(samples, &self.spec.spline_options()).stage("interpolate")?;
        let dim = batch.paths[0].dim();
        if dim != self.spec.path_dim() {
            return Err(Error::Input(format!(
                "samples give a {dim}-dimensional path, model expects {}",
                self.spec.path_dim()
            )));
        }
        Ok(batch)
    }

    /// Grid indices feeding φ_Y: `n_enc` evenly spaced grid points including
    /// both ends, or every grid point followed by zero padding.
    pub fn readout_indices(&self, grid_len: usize) -> Vec<Option<usize>> {
        let n = self.spec.n_enc;
        if grid_len <= n {
            return (0..n).map(|i| (i < grid_len).then_some(i)).collect();
        }
        if n == 1 {
            return vec![Some(grid_len - 1)];
        }
        (0..n)
            .map(|i| Some(((i * (grid_len - 1)) as f64 / (n - 1) as f64).round() as usize))
            .collect()
    }

    fn plain(&self, role: Role, x: &NdArray) -> Result<NdArray> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.field_params(role).into_iter().map(|p| tape.constant(p.clone())).collect();
        let xv = tape.constant(x.clone());
        let out = self.fields.get(role).forward(&mut tape, &params, xv)?;
        Ok(tape.value(out).clone())
    }

    fn append_zero_column(x: &NdArray) -> Result<NdArray> {
        let (b, w) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(b * (w + 1));
        for i in 0..b {
            data.extend_from_slice(x.row(i));
            data.push(0.0);
        }
        NdArray::new(vec![b, w + 1], data)
    }

    fn columns(x: &NdArray, start: usize, len: usize) -> Result<NdArray> {
        let b = x.shape()[0];
        let mut data = Vec::with_capacity(b * len);
        for i in 0..b {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        NdArray::new(vec![b, len], data)
    }

    /// Encoder states at every grid time, `[batch, encoder_dim]` each.
    pub fn encode(&self, batch: &Batch) -> Result<Vec<NdArray>> {
        let tr = self.run_encoder(batch)?;
        batch
            .grid
            .iter()
            .map(|&t| Self::columns(tr.at(t).expect("grid times are breakpoints"), 0, self.spec.encoder_dim))
            .collect()
    }

    fn run_encoder(&self, batch: &Batch) -> Result<Trajectory> {
        let e0 = self.plain(Role::MapperPhiE, &batch.eval(batch.grid[0])?)?;
        let enc = EncoderField { model: self, batch };
        let mut sys = FnSystem(|t: f64, y: &NdArray| eval_plain(&enc, t, y));
        let (times, states) = solve_system(
            &mut sys,
            Self::append_zero_column(&e0)?,
            batch.grid[0],
            batch.terminal(),
            &self.spec.solver,
            &batch.grid,
        )
        .stage("encode")?;
        Ok(Trajectory { times, states })
    }

    /// `z(τ_start) = φ_z(X(τ_start))` and `Y(τ_start) = φ_Y(⊕ e(t_i))`.
    pub fn init_latent_states(&self, readouts: &[NdArray], batch: &Batch) -> Result<(NdArray, NdArray)> {
        let z0 = self.plain(Role::MapperPhiZ, &self.x_at_start(batch)?)?;
        let y0 = self.plain(Role::MapperPhiY, &self.concat_readouts(readouts, batch.len())?)?;
        Ok((z0, y0))
    }

    fn x_at_start(&self, batch: &Batch) -> Result<NdArray> {
        let t = self.bounds.tau_start;
        if t > batch.terminal() {
            log::warn!("tau_start {t} beyond the data domain; X queried at {}", batch.terminal());
        }
        batch.eval_clamped(t)
    }

    fn concat_readouts(&self, readouts: &[NdArray], b: usize) -> Result<NdArray> {
        let enc = self.spec.encoder_dim;
        let n = self.spec.n_enc;
        let idx = self.readout_indices(readouts.len());
        let mut data = Vec::with_capacity(b * n * enc);
        for i in 0..b {
            for j in &idx {
                match j {
                    Some(j) => data.extend_from_slice(readouts[*j].row(i)),
                    None => data.extend(std::iter::repeat_n(0.0, enc)),
                }
            }
        }
        NdArray::new(vec![b, n * enc], data)
    }

    fn run_forward(&self, batch: &Batch) -> Result<Forward> {
        let encoder = self.run_encoder(batch)?;
        let enc = self.spec.encoder_dim;
        let readouts = batch
            .grid
            .iter()
            .map(|&t| Self::columns(encoder.at(t).expect("grid times are breakpoints"), 0, enc))
            .collect::<Result<Vec<_>>>()?;
        let (z0, y0) = self.init_latent_states(&readouts, batch).stage("initial state")?;
        let b = batch.len();
        let (hz, hy) = (self.spec.hidden_dim, self.spec.latent_dim);
        let mut s0 = Vec::with_capacity(b * (hz + hy + 1));
        for i in 0..b {
            s0.extend_from_slice(z0.row(i));
            s0.extend_from_slice(y0.row(i));
            s0.push(0.0);
        }
        let s0 = NdArray::new(vec![b, hz + hy + 1], s0)?;
        let main = MainField { model: self };
        let mut sys = FnSystem(|t: f64, y: &NdArray| eval_plain(&main, t, y));
        let (times, states) = solve_system(
            &mut sys,
            s0.clone(),
            self.bounds.tau_start,
            self.bounds.tau_end,
            &self.spec.solver,
            &[],
        )
        .stage("main solve")?;
        Ok(Forward {
            e_final: encoder.last().clone(),
            x_start: self.x_at_start(batch)?,
            readouts,
            s0,
            main: Trajectory { times, states },
            encoder,
        })
    }

    /// Output head values, `[batch, output_dim]` (logits for classification).
    pub fn forward(&self, batch: &Batch) -> Result<NdArray> {
        let fwd = self.run_forward(batch)?;
        let z = Self::columns(fwd.main.last(), 0, self.spec.hidden_dim)?;
        self.plain(Role::OutputHead, &z).stage("output")
    }

    pub fn predict(&self, sample: &TimeSeriesSample) -> Result<Vec<f64>> {
        let batch = self.prepare(&[sample])?;
        Ok(self.forward(&batch)?.into_data())
    }

    /// Main-CDE state trajectory `[z | Y | kinetic]` over `[τ_start, τ_end]`.
    pub fn main_trajectory(&self, batch: &Batch) -> Result<Trajectory> {
        Ok(self.run_forward(batch)?.main)
    }

    fn kinetic_scale(&self, obj: &Objective, b: usize) -> f64 {
        obj.c_kr / (b as f64 * self.bounds.terminal)
    }

    fn kinetic_sum(&self, fwd: &Forward) -> f64 {
        let enc_col = self.spec.encoder_dim;
        let main_col = self.spec.hidden_dim + self.spec.latent_dim;
        let col_sum = |x: &NdArray, c: usize| (0..x.shape()[0]).map(|i| x.row(i)[c]).sum::<f64>();
        col_sum(&fwd.e_final, enc_col) + col_sum(fwd.main.last(), main_col)
    }

    /// Total loss (task plus kinetic term) without gradients.
    pub fn loss(&self, batch: &Batch, targets: &Targets, obj: &Objective) -> Result<(f64, f64)> {
        let fwd = self.run_forward(batch)?;
        let z = Self::columns(fwd.main.last(), 0, self.spec.hidden_dim)?;
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .field_params(Role::OutputHead)
            .into_iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let zv = tape.constant(z);
        let logits = self.fields.output.forward(&mut tape, &params, zv)?;
        let task = record_task_loss(&mut tape, logits, targets)?;
        let task = tape.value(task).item();
        Ok((task + self.kinetic_scale(obj, batch.len()) * self.kinetic_sum(&fwd), task))
    }

    /// Loss and gradients by the chosen route.
    pub fn loss_and_grads(&self, batch: &Batch, targets: &Targets, obj: &Objective, mode: GradMode) -> Result<LossGrads> {
        if targets.len() != batch.len() {
            return Err(Error::Input(format!("{} targets for {} samples", targets.len(), batch.len())));
        }
        match mode {
            GradMode::Direct => self.grads_direct(batch, targets, obj),
            GradMode::Adjoint => self.grads_adjoint(batch, targets, obj),
        }
    }

    fn register(&self, tape: &mut Tape, constant: bool) -> Handles {
        Handles(
            Role::ALL
                .iter()
                .map(|&role| {
                    let field = self.fields.get(role);
                    field
                        .param_names()
                        .into_iter()
                        .map(|n| {
                            let v = self.params.get(&n).expect("model parameters match fields").clone();
                            if constant {
                                tape.constant(v)
                            } else {
                                tape.param(n, v)
                            }
                        })
                        .collect()
                })
                .collect(),
        )
    }

    /// dL/dτ_end and dL/dτ_start from the adjoint states at both bounds.
    fn tau_grads(&self, batch: &Batch, a_end: &NdArray, s_end: &NdArray, a_start: &NdArray, s_start: &NdArray, a_x_start: &NdArray) -> Result<(f64, f64)> {
        let main = MainField { model: self };
        let f_end = eval_plain(&main, self.bounds.tau_end, s_end)?;
        let f_start = eval_plain(&main, self.bounds.tau_start, s_start)?;
        let xdot = batch.derivative(self.bounds.tau_start.clamp(batch.grid[0], batch.terminal()))?;
        let d_end = a_end.dot(&f_end);
        let d_start = a_x_start.dot(&xdot) - a_start.dot(&f_start);
        Ok((d_start, d_end))
    }

    fn grads_direct(&self, batch: &Batch, targets: &Targets, obj: &Objective) -> Result<LossGrads> {
        let b = batch.len();
        let (enc, hz, hy) = (self.spec.encoder_dim, self.spec.hidden_dim, self.spec.latent_dim);
        let mut tape = Tape::new();
        let h = self.register(&mut tape, false);

        let x0 = tape.constant(batch.eval(batch.grid[0])?);
        let e0 = self.fields.phi_e.forward(&mut tape, h.get(Role::MapperPhiE), x0)?;
        let zero = tape.constant(NdArray::zeros(&[b, 1]));
        let e0 = tape.concat(&[e0, zero], 1)?;
        let encf = EncoderField { model: self, batch };
        let (times, states) = integrate_on_tape(
            &mut tape,
            &encf,
            h.get(Role::CdeK),
            e0,
            batch.grid[0],
            batch.terminal(),
            &self.spec.solver,
            &batch.grid,
        )
        .stage("encode")?;
        let enc_q = tape.slice(*states.last().unwrap(), 1, enc, 1)?;
        let mut parts = Vec::with_capacity(self.spec.n_enc);
        for idx in self.readout_indices(batch.grid.len()) {
            let v = match idx {
                Some(i) => {
                    let k = times.iter().position(|&t| t == batch.grid[i]).expect("grid times are breakpoints");
                    tape.slice(states[k], 1, 0, enc)?
                }
                None => tape.constant(NdArray::zeros(&[b, enc])),
            };
            parts.push(v);
        }
        let r = tape.concat(&parts, 1)?;
        let y0 = self.fields.phi_y.forward(&mut tape, h.get(Role::MapperPhiY), r)?;
        let xs = tape.input(self.x_at_start(batch)?);
        let z0 = self.fields.phi_z.forward(&mut tape, h.get(Role::MapperPhiZ), xs)?;
        let s0 = tape.concat(&[z0, y0, zero], 1)?;

        let mut fg = h.get(Role::OdeF).to_vec();
        fg.extend_from_slice(h.get(Role::CdeG));
        let main = MainField { model: self };
        let (_, ms) = integrate_on_tape(
            &mut tape,
            &main,
            &fg,
            s0,
            self.bounds.tau_start,
            self.bounds.tau_end,
            &self.spec.solver,
            &[],
        )
        .stage("main solve")?;
        let s_end = *ms.last().unwrap();
        let z_end = tape.slice(s_end, 1, 0, hz)?;
        let main_q = tape.slice(s_end, 1, hz + hy, 1)?;
        let logits = self.fields.output.forward(&mut tape, h.get(Role::OutputHead), z_end)?;
        let task = record_task_loss(&mut tape, logits, targets)?;
        let q = tape.concat(&[enc_q, main_q], 1)?;
        let q = tape.sum(q)?;
        let kin = tape.scale(q, self.kinetic_scale(obj, b))?;
        let loss = tape.add(task, kin)?;

        let grads = tape.backward_from(loss, &NdArray::scalar(1.0))?;
        let mut store = ParamStore::new();
        for (name, g) in grads.params() {
            store.insert(name, g);
        }
        let (d_start, d_end) = self.tau_grads(
            batch,
            &grads.wrt(s_end),
            tape.value(s_end),
            &grads.wrt(s0),
            tape.value(s0),
            &grads.wrt(xs),
        )?;
        Ok(LossGrads {
            loss: tape.value(loss).item(),
            task_loss: tape.value(task).item(),
            grads: store,
            d_tau_start: d_start,
            d_tau_end: d_end,
        })
    }

    fn grads_adjoint(&self, batch: &Batch, targets: &Targets, obj: &Objective) -> Result<LossGrads> {
        let b = batch.len();
        let (enc, hz, hy) = (self.spec.encoder_dim, self.spec.hidden_dim, self.spec.latent_dim);
        let kc = self.kinetic_scale(obj, b);
        let fwd = self.run_forward(batch)?;
        let mut store = ParamStore::new();
        let put = |store: &mut ParamStore, field: &MlpField, arrays: Vec<NdArray>| {
            for (n, g) in field.param_names().into_iter().zip(arrays) {
                store.insert(n, g);
            }
        };

        // output head and task loss
        let s_end = fwd.main.last();
        let mut tape = Tape::new();
        let h = self.register(&mut tape, false);
        let z_end = tape.input(Self::columns(s_end, 0, hz)?);
        let logits = self.fields.output.forward(&mut tape, h.get(Role::OutputHead), z_end)?;
        let task = record_task_loss(&mut tape, logits, targets)?;
        let task_loss = tape.value(task).item();
        let gr = tape.backward_from(task, &NdArray::scalar(1.0))?;
        put(&mut store, &self.fields.output, h.get(Role::OutputHead).iter().map(|&v| gr.wrt(v)).collect());
        let a_z = gr.wrt(z_end);

        // main CDE backwards from τ_end
        let mut a_end = Vec::with_capacity(b * (hz + hy + 1));
        for i in 0..b {
            a_end.extend_from_slice(a_z.row(i));
            a_end.extend(std::iter::repeat_n(0.0, hy));
            a_end.push(kc);
        }
        let a_end = NdArray::new(vec![b, hz + hy + 1], a_end)?;
        let main = MainField { model: self };
        let policy = match self.spec.state_recovery {
            StateRecovery::Recompute => AdjointPolicy::Recompute,
            StateRecovery::Checkpoint => AdjointPolicy::Checkpoint(&fwd.main),
        };
        let adj = integrate_adjoint(
            &main,
            s_end,
            self.bounds.tau_start,
            self.bounds.tau_end,
            &self.spec.solver,
            &[],
            &[(self.bounds.tau_end, a_end.clone())],
            policy,
        )
        .stage("main adjoint")?;
        let nf = 2 * self.fields.f.layers.len();
        let mut pg = adj.grad_params;
        let gg = pg.split_off(nf);
        put(&mut store, &self.fields.f, pg);
        put(&mut store, &self.fields.g, gg);

        // initial-state maps
        let mut tape = Tape::new();
        let h = self.register(&mut tape, false);
        let xs = tape.input(fwd.x_start.clone());
        let z0 = self.fields.phi_z.forward(&mut tape, h.get(Role::MapperPhiZ), xs)?;
        let rs: Vec<Var> = fwd.readouts.iter().map(|r| tape.input(r.clone())).collect();
        let mut parts = Vec::with_capacity(self.spec.n_enc);
        for idx in self.readout_indices(rs.len()) {
            parts.push(match idx {
                Some(i) => rs[i],
                None => tape.constant(NdArray::zeros(&[b, enc])),
            });
        }
        let r = tape.concat(&parts, 1)?;
        let y0 = self.fields.phi_y.forward(&mut tape, h.get(Role::MapperPhiY), r)?;
        let zy = tape.concat(&[z0, y0], 1)?;
        let a_zy = Self::columns(&adj.grad_state, 0, hz + hy)?;
        let gr = tape.backward_from(zy, &a_zy)?;
        put(&mut store, &self.fields.phi_z, h.get(Role::MapperPhiZ).iter().map(|&v| gr.wrt(v)).collect());
        put(&mut store, &self.fields.phi_y, h.get(Role::MapperPhiY).iter().map(|&v| gr.wrt(v)).collect());
        let (d_start, d_end) = self.tau_grads(batch, &a_end, s_end, &adj.grad_state, &fwd.s0, &gr.wrt(xs))?;

        // encoder backwards from T with readout seeds
        let mut seeds = Vec::with_capacity(rs.len() + 1);
        for (i, &rv) in rs.iter().enumerate() {
            let g = gr.wrt(rv);
            if g.max_abs() > 0.0 {
                seeds.push((batch.grid[i], Self::append_zero_column(&g)?));
            }
        }
        let mut q_seed = NdArray::zeros(&[b, enc + 1]);
        for i in 0..b {
            q_seed.data_mut()[i * (enc + 1) + enc] = kc;
        }
        seeds.push((batch.terminal(), q_seed));
        let encf = EncoderField { model: self, batch };
        let policy = match self.spec.state_recovery {
            StateRecovery::Recompute => AdjointPolicy::Recompute,
            StateRecovery::Checkpoint => AdjointPolicy::Checkpoint(&fwd.encoder),
        };
        let adj_e = integrate_adjoint(
            &encf,
            &fwd.e_final,
            batch.grid[0],
            batch.terminal(),
            &self.spec.solver,
            &batch.grid,
            &seeds,
            policy,
        )
        .stage("encoder adjoint")?;
        put(&mut store, &self.fields.k, adj_e.grad_params);

        let mut tape = Tape::new();
        let h = self.register(&mut tape, false);
        let x0 = tape.constant(batch.eval(batch.grid[0])?);
        let e0 = self.fields.phi_e.forward(&mut tape, h.get(Role::MapperPhiE), x0)?;
        let gr = tape.backward_from(e0, &Self::columns(&adj_e.grad_state, 0, enc)?)?;
        put(&mut store, &self.fields.phi_e, h.get(Role::MapperPhiE).iter().map(|&v| gr.wrt(v)).collect());

        // same order as the parameter store
        let mut ordered = ParamStore::new();
        for (name, _) in self.params.iter() {
            let g = store.get(name).expect("every field visited").clone();
            ordered.insert(name.clone(), g);
        }
        Ok(LossGrads {
            loss: task_loss + kc * self.kinetic_sum(&fwd),
            task_loss,
            grads: ordered,
            d_tau_start: d_start,
            d_tau_end: d_end,
        })
    }
}

/// Repair bounds after an update: `τ_start ≥ 0`, `τ_start ≤ T − δ`,
/// `τ_end ≥ τ_start + δ` with `δ = 1e-3·T`, then apply the mode's freezes.
pub fn clamp_bounds(bounds: IntegrationBounds, mode: ExitMode) -> IntegrationBounds {
    let t = bounds.terminal;
    let delta = 1e-3 * t;
    let mut out = bounds;
    match mode {
        ExitMode::FixedExit => {
            out.tau_start = 0.0;
            out.tau_end = t;
            return out;
        }
        ExitMode::TerminalExit => out.tau_start = 0.0,
        ExitMode::Exit => out.tau_start = out.tau_start.max(0.0).min(t - delta),
    }
    if out.tau_start.is_nan() {
        out.tau_start = 0.0;
    }
    if out.tau_end.is_nan() || out.tau_end <= out.tau_start + delta {
        out.tau_end = out.tau_start + delta;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solve::Method;

    fn bounds(s: f64, e: f64, t: f64) -> IntegrationBounds {
        IntegrationBounds {
            tau_start: s,
            tau_end: e,
            terminal: t,
        }
    }

    #[test]
    fn clamp_examples() {
        let b = clamp_bounds(bounds(-0.5, 10.0, 10.0), ExitMode::Exit);
        assert_eq!((b.tau_start, b.tau_end), (0.0, 10.0));
        let b = clamp_bounds(bounds(5.0, 4.9, 10.0), ExitMode::Exit);
        assert_eq!(b.tau_start, 5.0);
        assert!((b.tau_end - 5.01).abs() < 1e-12);
        let b = clamp_bounds(bounds(0.0, 12.0, 10.0), ExitMode::Exit);
        assert_eq!((b.tau_start, b.tau_end), (0.0, 12.0));
    }

    #[test]
    fn clamp_modes() {
        let b = clamp_bounds(bounds(2.0, 7.0, 10.0), ExitMode::FixedExit);
        assert_eq!((b.tau_start, b.tau_end), (0.0, 10.0));
        let b = clamp_bounds(bounds(2.0, 7.0, 10.0), ExitMode::TerminalExit);
        assert_eq!((b.tau_start, b.tau_end), (0.0, 7.0));
        let b = clamp_bounds(bounds(11.0, 12.0, 10.0), ExitMode::Exit);
        assert!((b.tau_start - 9.99).abs() < 1e-12 && b.tau_end == 12.0);
    }

    #[test]
    fn readout_selection() {
        let spec = ModelSpec {
            input_channels: 1,
            output_dim: 2,
            n_enc: 5,
            ..Default::default()
        };
        let m = ExitModel::new(spec, 10.0, ExitMode::Exit, 0).unwrap();
        assert_eq!(m.readout_indices(3), vec![Some(0), Some(1), Some(2), None, None]);
        assert_eq!(m.readout_indices(9), vec![Some(0), Some(2), Some(4), Some(6), Some(8)]);
    }

    #[test]
    fn phi_y_width_counts_readouts() {
        let spec = ModelSpec {
            input_channels: 1,
            output_dim: 2,
            n_enc: 5,
            encoder_dim: 40,
            ..Default::default()
        };
        let fields = spec.build_fields().unwrap();
        assert_eq!(fields.phi_y.input_width(), 200);
    }

    fn scalar_fields(tape: &mut Tape, state: NdArray, t: f64, g: f64, f: f64) -> NdArray {
        let s = tape.constant(state);
        let out = combined_dynamics(
            tape,
            s,
            t,
            1,
            1,
            |tape, _| Ok(tape.constant(NdArray::full(&[1, 1], f))),
            |tape, _| Ok(tape.constant(NdArray::full(&[1, 1, 1], g))),
        )
        .unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn combined_dynamics_scalar_toy() {
        // g = 2, f = 3: dz/dt = 6, so z(τ_end) = z0 + 6·(τ_end − τ_start)
        let mut sys = FnSystem(|t: f64, y: &NdArray| Ok(scalar_fields(&mut Tape::new(), y.clone(), t, 2.0, 3.0)));
        let z0 = NdArray::new(vec![1, 2], vec![0.5, -1.0]).unwrap();
        let (_, states) = solve_system(&mut sys, z0, 1.5, 4.0, &SolverConfig::fixed(Method::Rk4, 0.1), &[]).unwrap();
        let end = states.last().unwrap();
        assert!((end.data()[0] - (0.5 + 6.0 * 2.5)).abs() < 1e-12);
        assert!((end.data()[1] - (-1.0 + 3.0 * 2.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_f_freezes_state() {
        let d = scalar_fields(&mut Tape::new(), NdArray::new(vec![1, 2], vec![3.0, 4.0]).unwrap(), 0.0, 5.0, 0.0);
        assert_eq!(d.data(), &[0.0, 0.0]);
    }

    #[test]
    fn wrong_state_width_is_rejected() {
        let mut tape = Tape::new();
        let s = tape.constant(NdArray::zeros(&[1, 1]));
        let r = combined_dynamics(&mut tape, s, 0.0, 1, 1, |_, x| Ok(x), |_, x| Ok(x));
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
