use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterStore};
use crate::error::{DfnError, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Layer widths of a multi-layer perceptron, input first. Hidden layers use
/// a leaky rectifier; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSpec {
    pub widths: Vec<usize>,
    pub slope: f64,
}

impl DenseSpec {
    pub fn new(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(DfnError::InvalidInput(format!(
                "dense spec needs at least one layer of positive widths, got {widths:?}"
            )));
        }
        Ok(DenseSpec {
            widths: widths.to_vec(),
            slope: LEAKY_SLOPE,
        })
    }

    /// `input`, `hidden` repeated `hidden_layers` times, then `output`.
    pub fn mlp(input: usize, hidden: usize, hidden_layers: usize, output: usize) -> Result<Self> {
        let mut w = vec![input];
        w.extend(std::iter::repeat_n(hidden, hidden_layers));
        w.push(output);
        Self::new(&w)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub spec: DenseSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Dense {
    pub fn new(store: &mut ParameterStore, name: &str, spec: DenseSpec) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.widths.len() - 1);
        for (i, pair) in spec.widths.windows(2).enumerate() {
            let w = store.weight(&format!("{name}.l{i}.w"), pair[0], pair[1])?;
            let b = store.bias(&format!("{name}.l{i}.b"), pair[1])?;
            layers.push((w, b));
        }
        Ok(Dense { spec, layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, input: Var) -> Result<Var> {
        let width = g.value(input).cols;
        if width != self.spec.input_width() {
            return Err(DfnError::Shape {
                op: "dense_forward",
                detail: format!("input width {width}, layer expects {}", self.spec.input_width()),
            });
        }
        let mut x = input;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(store, *w);
            let bv = g.param(store, *b);
            x = g.affine(x, wv, bv);
            if i < last {
                x = g.leaky_relu(x, self.spec.slope);
            }
        }
        Ok(x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }

    /// Bias of the output layer.
    pub fn output_bias(&self) -> ParamId {
        self.layers.last().unwrap().1
    }
}

/// Gated recurrent unit with reset, update and candidate blocks laid out
/// side by side in the weight columns.
#[derive(Debug, Clone)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl Gru {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Gru {
            input,
            hidden,
            w_ih: store.weight(&format!("{name}.w_ih"), input, 3 * hidden)?,
            w_hh: store.weight(&format!("{name}.w_hh"), hidden, 3 * hidden)?,
            b_ih: store.bias(&format!("{name}.b_ih"), 3 * hidden)?,
            b_hh: store.bias(&format!("{name}.b_hh"), 3 * hidden)?,
        })
    }

    /// `r = sig(.)`, `u = sig(.)`, `n = tanh(W_in x + b_in + r * (W_hn h + b_hn))`,
    /// `h' = n + u * (h - n)`.
    pub fn step(&self, g: &mut Graph, store: &ParameterStore, x: Var, h: Var) -> Result<Var> {
        let (xw, hw) = (g.value(x).cols, g.value(h).cols);
        if xw != self.input || hw != self.hidden {
            return Err(DfnError::Shape {
                op: "gru_cell_step",
                detail: format!("input {xw}/hidden {hw}, cell expects {}/{}", self.input, self.hidden),
            });
        }
        let hs = self.hidden;
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b_ih = g.param(store, self.b_ih);
        let b_hh = g.param(store, self.b_hh);
        let gi = g.affine(x, w_ih, b_ih);
        let gh = g.affine(h, w_hh, b_hh);
        let (ir, iu, inn) = (
            g.slice_cols(gi, 0, hs),
            g.slice_cols(gi, hs, hs),
            g.slice_cols(gi, 2 * hs, hs),
        );
        let (hr, hu, hn) = (
            g.slice_cols(gh, 0, hs),
            g.slice_cols(gh, hs, hs),
            g.slice_cols(gh, 2 * hs, hs),
        );
        let r = g.add(ir, hr);
        let r = g.sigmoid(r);
        let u = g.add(iu, hu);
        let u = g.sigmoid(u);
        let rn = g.mul(r, hn);
        let n = g.add(inn, rn);
        let n = g.tanh(n);
        let diff = g.sub(h, n);
        let ud = g.mul(u, diff);
        Ok(g.add(n, ud))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }
}

/// GRU layers applied in sequence; layer `k > 0` consumes layer `k - 1`'s
/// new hidden state.
#[derive(Debug, Clone)]
pub struct StackedGru {
    pub cells: Vec<Gru>,
}

impl StackedGru {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize, layers: usize) -> Result<Self> {
        let mut cells = Vec::with_capacity(layers);
        for l in 0..layers {
            let inp = if l == 0 { input } else { hidden };
            cells.push(Gru::new(store, &format!("{name}.{l}"), inp, hidden)?);
        }
        Ok(StackedGru { cells })
    }

    pub fn step(&self, g: &mut Graph, store: &ParameterStore, x: Var, hidden: &[Var]) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.cells.len());
        let mut inp = x;
        for (cell, h) in self.cells.iter().zip(hidden) {
            let nh = cell.step(g, store, inp, *h)?;
            out.push(nh);
            inp = nh;
        }
        Ok(out)
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }
}
