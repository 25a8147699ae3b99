//! Manual reverse-mode gradients through the recurrence (BPTT).

use ndarray::{Array1, Array2, Axis};

use super::{HiddenTrace, LayerParams, RetrieverParams, LAMBDA_MAX};

/// Gradients with the same layout as [`RetrieverParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub w_in: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub w_out: Array2<f64>,
}

impl Grads {
    pub fn zeros_like(p: &RetrieverParams) -> Self {
        Grads {
            w_in: Array2::zeros(p.w_in.raw_dim()),
            layers: p
                .layers
                .iter()
                .map(|l| LayerParams {
                    raw_lambda: Array1::zeros(l.raw_lambda.raw_dim()),
                    b: Array2::zeros(l.b.raw_dim()),
                    c: Array2::zeros(l.c.raw_dim()),
                })
                .collect(),
            w_out: Array2::zeros(p.w_out.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        self.w_in += &other.w_in;
        self.w_out += &other.w_out;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.raw_lambda += &b.raw_lambda;
            a.b += &b.b;
            a.c += &b.c;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.w_in *= k;
        self.w_out *= k;
        for l in &mut self.layers {
            l.raw_lambda *= k;
            l.b *= k;
            l.c *= k;
        }
    }

    /// Same order as [`RetrieverParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(self.w_in.iter());
        for l in &self.layers {
            v.extend(l.raw_lambda.iter());
            v.extend(l.b.iter());
            v.extend(l.c.iter());
        }
        v.extend(self.w_out.iter());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }
}

/// Backpropagates query gradients `(position, dL/dq)` through the stack.
pub fn backward(params: &RetrieverParams, trace: &HiddenTrace, query_grads: &[(usize, Array1<f64>)]) -> Grads {
    let t = trace.len();
    let mut grads = Grads::zeros_like(params);

    // query_t = w_out^T y_t
    let mut g_y = Array2::<f64>::zeros((t, params.hidden));
    for (pos, dq) in query_grads {
        let y = trace.top.row(*pos);
        grads.w_out += &outer(&y.to_owned(), dq);
        let mut row = g_y.row_mut(*pos);
        row += &params.w_out.dot(dq);
    }

    for (l, layer) in params.layers.iter().enumerate().rev() {
        let g_o = match &trace.masks {
            Some(m) => &g_y * &m[l],
            None => g_y,
        };
        let x = &trace.inputs[l];
        let h = &trace.states[l];
        let lambda = layer.lambda();

        let gl = &mut grads.layers[l];
        // o_t = C h_t + x_t
        gl.c = g_o.t().dot(h);
        let g_h_direct = g_o.dot(&layer.c);

        // h_t = lambda ⊙ h_{t-1} + B x_t, reversed in time
        let mut g_h = Array2::<f64>::zeros((t, params.hidden));
        let mut carry = Array1::<f64>::zeros(params.hidden);
        for i in (0..t).rev() {
            let g = &g_h_direct.row(i) + &(&lambda * &carry);
            g_h.row_mut(i).assign(&g);
            carry = g;
        }
        let mut d_lambda = Array1::<f64>::zeros(params.hidden);
        for i in 1..t {
            d_lambda += &(&g_h.row(i) * &h.row(i - 1));
        }
        gl.raw_lambda = &d_lambda * &layer.raw_lambda.mapv(|r| LAMBDA_MAX * (1.0 - r.tanh().powi(2)));
        gl.b = g_h.t().dot(x);

        g_y = g_o + g_h.dot(&layer.b);
    }

    // x_t = w_in^T e_t
    grads.w_in = trace.embeddings.t().dot(&g_y);
    grads
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}
