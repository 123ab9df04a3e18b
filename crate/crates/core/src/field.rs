//! Parameterized vector fields: the CDE functions, the ODE function, the
//! initial-state mappers and the output head.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NdArray, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Tanh,
    Sigmoid,
    Elu,
}

impl Activation {
    /// Glyph shorthand: ρ relu, ξ tanh, σ sigmoid, ε elu.
    pub fn from_glyph(glyph: char) -> Option<Self> {
        match glyph {
            'ρ' => Some(Activation::Relu),
            'ξ' => Some(Activation::Tanh),
            'σ' => Some(Activation::Sigmoid),
            'ε' => Some(Activation::Elu),
            _ => None,
        }
    }

    /// Allowed in hidden layers without opting out of the Lipschitz policy.
    pub fn is_unit_lipschitz_default(self) -> bool {
        matches!(self, Activation::None | Activation::Relu | Activation::Tanh)
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::None => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Elu => tape.elu(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    CdeK,
    CdeG,
    OdeF,
    MapperPhiE,
    MapperPhiZ,
    MapperPhiY,
    OutputHead,
}

impl Role {
    pub fn is_cde(self) -> bool {
        matches!(self, Role::CdeK | Role::CdeG)
    }

    /// Parameter-name prefix.
    pub fn prefix(self) -> &'static str {
        match self {
            Role::CdeK => "k",
            Role::CdeG => "g",
            Role::OdeF => "f",
            Role::MapperPhiE => "phi_e",
            Role::MapperPhiZ => "phi_z",
            Role::MapperPhiY => "phi_y",
            Role::OutputHead => "output",
        }
    }

    /// Weight decay applies to the mappers and the head; kinetic
    /// regularization covers the dynamics.
    pub fn is_decayed(self) -> bool {
        matches!(
            self,
            Role::MapperPhiE | Role::MapperPhiZ | Role::MapperPhiY | Role::OutputHead
        )
    }

    pub const ALL: [Role; 7] = [
        Role::MapperPhiE,
        Role::CdeK,
        Role::MapperPhiZ,
        Role::MapperPhiY,
        Role::CdeG,
        Role::OdeF,
        Role::OutputHead,
    ];
}

/// Hidden layer widths and per-layer activations as written in a config.
/// `activations` has one entry per layer (hidden layers then the final one);
/// when omitted, hidden layers use `tanh` and the final layer uses the role's
/// default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSpec {
    pub hidden: Vec<usize>,
    pub activations: Option<Vec<Activation>>,
}

impl FieldSpec {
    pub fn new(hidden: &[usize], activations: Option<&[Activation]>) -> Self {
        FieldSpec {
            hidden: hidden.to_vec(),
            activations: activations.map(<[Activation]>::to_vec),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

/// A stack of affine layers with activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpField {
    pub role: Role,
    pub layers: Vec<LayerSpec>,
    /// For CDE roles: the `(rows, cols)` matrix the final vector reshapes to.
    pub reshape: Option<(usize, usize)>,
}

impl MlpField {
    /// Build from a config spec. For CDE roles `output` is `(rows, cols)`;
    /// otherwise `cols` must be 1 and `rows` is the output width.
    pub fn build(role: Role, input: usize, rows: usize, cols: usize, spec: &FieldSpec, allow_any_activation: bool) -> Result<Self> {
        let out_width = rows * cols;
        let n_layers = spec.hidden.len() + 1;
        let final_default = match role {
            Role::CdeK | Role::CdeG | Role::OdeF => Activation::Tanh,
            _ => Activation::None,
        };
        let acts = match &spec.activations {
            Some(a) if a.len() != n_layers => {
                return Err(Error::FieldSpec {
                    layer: a.len().min(n_layers),
                    msg: format!("{} activations given for {n_layers} layers", a.len()),
                })
            }
            Some(a) => a.clone(),
            None => {
                let mut a = vec![Activation::Tanh; spec.hidden.len()];
                a.push(final_default);
                a
            }
        };
        let mut widths = vec![input];
        widths.extend(&spec.hidden);
        widths.push(out_width);
        let layers = (0..n_layers)
            .map(|i| LayerSpec {
                input: widths[i],
                output: widths[i + 1],
                activation: acts[i],
            })
            .collect();
        let field = MlpField {
            role,
            layers,
            reshape: role.is_cde().then_some((rows, cols)),
        };
        field.validate(allow_any_activation)?;
        Ok(field)
    }

    pub fn validate(&self, allow_any_activation: bool) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::FieldSpec {
                layer: 0,
                msg: "no layers".into(),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.input == 0 || l.output == 0 {
                return Err(Error::FieldSpec {
                    layer: i,
                    msg: "zero width".into(),
                });
            }
            if i > 0 && self.layers[i - 1].output != l.input {
                return Err(Error::FieldSpec {
                    layer: i,
                    msg: format!(
                        "input width {} does not match previous output {}",
                        l.input,
                        self.layers[i - 1].output
                    ),
                });
            }
            let hidden = i + 1 < self.layers.len();
            if hidden && !allow_any_activation && !l.activation.is_unit_lipschitz_default() {
                return Err(Error::FieldSpec {
                    layer: i,
                    msg: format!(
                        "hidden activation {:?} is outside the default Lipschitz policy (tanh, relu)",
                        l.activation
                    ),
                });
            }
        }
        let last = self.layers.len() - 1;
        match (self.role.is_cde(), self.reshape) {
            (true, Some((r, c))) if r * c == self.layers[last].output => Ok(()),
            (true, _) => Err(Error::FieldSpec {
                layer: last,
                msg: format!(
                    "final width {} must equal hidden_dim x path_dim {:?}",
                    self.layers[last].output, self.reshape
                ),
            }),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(Error::FieldSpec {
                layer: last,
                msg: "only CDE roles reshape their output".into(),
            }),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().output
    }

    pub fn param_names(&self) -> Vec<String> {
        let p = self.role.prefix();
        (0..self.layers.len())
            .flat_map(|i| [format!("{p}.{i}.weight"), format!("{p}.{i}.bias")])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| (l.input + 1) * l.output).sum()
    }

    /// Weights `U(-1/√fan_in, 1/√fan_in)`, biases zero.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<(String, NdArray)> {
        let names = self.param_names();
        let mut out = Vec::with_capacity(names.len());
        for (i, l) in self.layers.iter().enumerate() {
            let bound = 1.0 / (l.input as f64).sqrt();
            let w: Vec<f64> = (0..l.input * l.output).map(|_| rng.random_range(-bound..=bound)).collect();
            out.push((names[2 * i].clone(), NdArray::from_parts(vec![l.input, l.output], w)));
            out.push((names[2 * i + 1].clone(), NdArray::zeros(&[l.output])));
        }
        out
    }

    /// Record the field on `tape`. `params` holds weight and bias handles per
    /// layer; `x` is `[batch, input]`. CDE roles return `[batch, rows, cols]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_width() {
            return Err(Error::FieldSpec {
                layer: 0,
                msg: format!("{:?} expects [batch, {}] input, got {shape:?}", self.role, self.input_width()),
            });
        }
        if params.len() != 2 * self.layers.len() {
            return Err(Error::FieldSpec {
                layer: 0,
                msg: format!("{} parameter handles for {} layers", params.len(), self.layers.len()),
            });
        }
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = tape.matmul(h, params[2 * i])?;
            h = tape.add(h, params[2 * i + 1])?;
            h = l.activation.apply(tape, h)?;
        }
        match self.reshape {
            Some((r, c)) => tape.reshape(h, &[shape[0], r, c]),
            None => Ok(h),
        }
    }
}

/// `g(z)·dX/dt`: batched matrix-vector product of a CDE field output
/// `[batch, hidden, path]` with a path derivative `[batch, path]`.
pub fn cde_dynamics(tape: &mut Tape, field_out: Var, path_derivative: Var) -> Result<Var> {
    tape.bmv(field_out, path_derivative)
}

/// Named parameter arrays of a whole model, in a stable order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore(IndexMap<String, NdArray>);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdArray> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NdArray)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut NdArray)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_size(&self) -> usize {
        self.0.values().map(NdArray::len).sum()
    }

    /// Arrays of one field, in layer order.
    pub fn field(&self, field: &MlpField) -> Result<Vec<&NdArray>> {
        field
            .param_names()
            .iter()
            .map(|n| {
                self.0
                    .get(n)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
            })
            .collect()
    }

    /// Euclidean norm over every array whose name starts with `prefix.`.
    pub fn group_norm(&self, prefix: &str) -> f64 {
        let p = format!("{prefix}.");
        self.0
            .iter()
            .filter(|(k, _)| k.starts_with(&p))
            .map(|(_, v)| v.dot(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Trainable integration interval of the main CDE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationBounds {
    pub tau_start: f64,
    pub tau_end: f64,
    /// Terminal time of the data.
    pub terminal: f64,
}

impl IntegrationBounds {
    /// Bounds start at the data domain `(0, T)`.
    pub fn new(terminal: f64) -> Self {
        IntegrationBounds {
            tau_start: 0.0,
            tau_end: terminal,
            terminal,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.tau_start >= 0.0 && self.tau_start < self.tau_end && self.tau_end.is_finite()
    }
}
