//! Gated attention unit over a token matrix `[n, d]`.
//!
//! ```text
//! U = silu(X Wu)   V = silu(X Wv)   Z = silu(X Wz)
//! Q = Z ⊙ γq + βq  K = Z ⊙ γk + βk
//! A = relu(Q Kᵀ / √s)² / n
//! out = X + (U ⊙ A V) Wo
//! ```

use serde::{Deserialize, Serialize};

use super::layers::{silu, silu_backward, Linear};
use super::{Grads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GauConfig {
    pub model_dim: usize,
    pub expansion_dim: usize,
    pub attention_dim: usize,
}

impl GauConfig {
    /// Expansion `2d`, attention width 128.
    pub fn new(model_dim: usize) -> Self {
        GauConfig {
            model_dim,
            expansion_dim: 2 * model_dim,
            attention_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.expansion_dim == 0 || self.attention_dim == 0 {
            return Err(Error::invalid(format!("GAU dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gau {
    pub cfg: GauConfig,
    pub u: Linear,
    pub v: Linear,
    pub z: Linear,
    pub gamma_q: ParamId,
    pub beta_q: ParamId,
    pub gamma_k: ParamId,
    pub beta_k: ParamId,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct GauCache {
    x: Tensor,
    u_pre: Tensor,
    v_pre: Tensor,
    z_pre: Tensor,
    u: Tensor,
    v: Tensor,
    z: Tensor,
    q: Tensor,
    k: Tensor,
    scores: Tensor,
    attn: Tensor,
    av: Tensor,
    gated: Tensor,
}

impl GauCache {
    /// The `[n, n]` attention matrix of the last forward pass.
    pub fn attention(&self) -> &Tensor {
        &self.attn
    }
}

impl Gau {
    /// Registers parameters; `γ` starts at one, everything else at zero.
    pub fn new(store: &mut ParamStore, name: &str, cfg: GauConfig) -> Self {
        let (d, e, s) = (cfg.model_dim, cfg.expansion_dim, cfg.attention_dim);
        let u = Linear::new(store, &format!("{name}.u"), d, e);
        let v = Linear::new(store, &format!("{name}.v"), d, e);
        let z = Linear::new(store, &format!("{name}.z"), d, s);
        let gamma_q = store.add(format!("{name}.gamma_q"), Tensor::full(&[s], 1.0));
        let beta_q = store.add(format!("{name}.beta_q"), Tensor::zeros(&[s]));
        let gamma_k = store.add(format!("{name}.gamma_k"), Tensor::full(&[s], 1.0));
        let beta_k = store.add(format!("{name}.beta_k"), Tensor::zeros(&[s]));
        let out = Linear::new(store, &format!("{name}.o"), e, d);
        Gau {
            cfg,
            u,
            v,
            z,
            gamma_q,
            beta_q,
            gamma_k,
            beta_k,
            out,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, GauCache)> {
        let (n, d) = x.dims2()?;
        if d != self.cfg.model_dim || n == 0 {
            return Err(Error::shape(format!(
                "GAU expects [n>=1, {}], got {:?}",
                self.cfg.model_dim,
                x.shape()
            )));
        }
        let prec = store.precision();
        let (e, s) = (self.cfg.expansion_dim, self.cfg.attention_dim);
        let u_pre = self.u.forward(store, x)?;
        let v_pre = self.v.forward(store, x)?;
        let z_pre = self.z.forward(store, x)?;
        let u = silu(&u_pre);
        let v = silu(&v_pre);
        let z = silu(&z_pre);

        let affine = |g: ParamId, b: ParamId| {
            let (g, b) = (store.value(g).data(), store.value(b).data());
            let mut t = z.clone();
            for r in 0..n {
                for (j, val) in t.row_mut(r).iter_mut().enumerate() {
                    *val = *val * g[j] + b[j];
                }
            }
            t
        };
        let q = affine(self.gamma_q, self.beta_q);
        let k = affine(self.gamma_k, self.beta_k);

        let inv_sqrt_s = 1.0 / (s as f64).sqrt();
        let inv_n = 1.0 / n as f64;
        let mut scores = Tensor::zeros(&[n, n]);
        let mut attn = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let sc: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>()
                    * inv_sqrt_s;
                scores.data_mut()[i * n + j] = sc;
                let r = sc.max(0.0);
                attn.data_mut()[i * n + j] = r * r * inv_n;
            }
        }
        prec.apply(&mut attn);

        let mut av = Tensor::zeros(&[n, e]);
        for i in 0..n {
            for j in 0..n {
                let a = attn.data()[i * n + j];
                if a == 0.0 {
                    continue;
                }
                let vj = v.row(j).to_vec();
                for (o, vv) in av.row_mut(i).iter_mut().zip(&vj) {
                    *o += a * vv;
                }
            }
        }
        let mut gated = u.clone();
        for (g, a) in gated.data_mut().iter_mut().zip(av.data()) {
            *g *= a;
        }
        prec.apply(&mut gated);
        let mut y = self.out.forward(store, &gated)?;
        y.add_assign(x);
        prec.apply(&mut y);

        Ok((
            y,
            GauCache {
                x: x.clone(),
                u_pre,
                v_pre,
                z_pre,
                u,
                v,
                z,
                q,
                k,
                scores,
                attn,
                av,
                gated,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        c: &GauCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let (n, _) = c.x.dims2()?;
        let (e, s) = (self.cfg.expansion_dim, self.cfg.attention_dim);
        let inv_sqrt_s = 1.0 / (s as f64).sqrt();
        let inv_n = 1.0 / n as f64;

        let mut dx = dy.clone();
        let dgated = self.out.backward(store, &c.gated, dy, grads)?;

        let mut du = dgated.clone();
        for (g, a) in du.data_mut().iter_mut().zip(c.av.data()) {
            *g *= a;
        }
        let mut dav = dgated;
        for (g, u) in dav.data_mut().iter_mut().zip(c.u.data()) {
            *g *= u;
        }

        // dA = dAV · Vᵀ, dV = Aᵀ · dAV
        let mut dattn = Tensor::zeros(&[n, n]);
        let mut dv = Tensor::zeros(&[n, e]);
        for i in 0..n {
            for j in 0..n {
                let vj = c.v.row(j);
                let g: f64 = dav.row(i).iter().zip(vj).map(|(a, b)| a * b).sum();
                dattn.data_mut()[i * n + j] = g;
                let a = c.attn.data()[i * n + j];
                if a != 0.0 {
                    let di = dav.row(i).to_vec();
                    for (o, d) in dv.row_mut(j).iter_mut().zip(&di) {
                        *o += a * d;
                    }
                }
            }
        }

        let mut dscores = Tensor::zeros(&[n, n]);
        for (ds, (da, sc)) in dscores
            .data_mut()
            .iter_mut()
            .zip(dattn.data().iter().zip(c.scores.data()))
        {
            *ds = da * 2.0 * sc.max(0.0) * inv_n;
        }

        let mut dq = Tensor::zeros(&[n, s]);
        let mut dk = Tensor::zeros(&[n, s]);
        for i in 0..n {
            for j in 0..n {
                let g = dscores.data()[i * n + j] * inv_sqrt_s;
                if g == 0.0 {
                    continue;
                }
                let kj = c.k.row(j).to_vec();
                for (o, kv) in dq.row_mut(i).iter_mut().zip(&kj) {
                    *o += g * kv;
                }
                let qi = c.q.row(i).to_vec();
                for (o, qv) in dk.row_mut(j).iter_mut().zip(&qi) {
                    *o += g * qv;
                }
            }
        }

        let gq = store.value(self.gamma_q).data().to_vec();
        let gk = store.value(self.gamma_k).data().to_vec();
        let mut dz = Tensor::zeros(&[n, s]);
        {
            let mut dgq = vec![0.0; s];
            let mut dbq = vec![0.0; s];
            let mut dgk = vec![0.0; s];
            let mut dbk = vec![0.0; s];
            for i in 0..n {
                for j in 0..s {
                    let (q, k, z) = (dq.row(i)[j], dk.row(i)[j], c.z.row(i)[j]);
                    dgq[j] += q * z;
                    dbq[j] += q;
                    dgk[j] += k * z;
                    dbk[j] += k;
                    dz.row_mut(i)[j] = q * gq[j] + k * gk[j];
                }
            }
            for (id, g) in [
                (self.gamma_q, dgq),
                (self.beta_q, dbq),
                (self.gamma_k, dgk),
                (self.beta_k, dbk),
            ] {
                for (a, b) in grads.get_mut(id).data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }

        let du_pre = silu_backward(&c.u_pre, &du);
        let dv_pre = silu_backward(&c.v_pre, &dv);
        let dz_pre = silu_backward(&c.z_pre, &dz);
        dx.add_assign(&self.u.backward(store, &c.x, &du_pre, grads)?);
        dx.add_assign(&self.v.backward(store, &c.x, &dv_pre, grads)?);
        dx.add_assign(&self.z.backward(store, &c.x, &dz_pre, grads)?);
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_store, Precision};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gau(seed: u64, cfg: GauConfig) -> (ParamStore, Gau) {
        let mut store = ParamStore::new(Precision::Double);
        let gau = Gau::new(&mut store, "gau", cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.value_mut(id).data_mut() {
                *v = rng.random_range(-0.6..0.6);
            }
        }
        (store, gau)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_input_zero_output() {
        let (mut store, gau) = random_gau(1, GauConfig::new(8));
        for p in ["gau.u.bias", "gau.v.bias", "gau.z.bias", "gau.o.bias", "gau.beta_q", "gau.beta_k"] {
            let id = store.id(p).unwrap();
            store.value_mut(id).fill(0.0);
        }
        let (y, _) = gau.forward(&store, &Tensor::zeros(&[5, 8])).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_token_and_shapes() {
        let (store, gau) = random_gau(2, GauConfig::new(6));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1, 2, 7] {
            let x = rand_tensor(&mut rng, &[n, 6]);
            let (y, cache) = gau.forward(&store, &x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.all_finite());
            assert_eq!(cache.attention().shape(), &[n, n]);
            assert!(cache.attention().data().iter().all(|a| *a >= 0.0));
        }
        assert!(gau.forward(&store, &Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn gradcheck_n5_d8() {
        let cfg = GauConfig {
            model_dim: 8,
            expansion_dim: 16,
            attention_dim: 12,
        };
        for seed in 0..5 {
            let (mut store, gau) = random_gau(seed, cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = rand_tensor(&mut rng, &[5, 8]);
            let r = rand_tensor(&mut rng, &[5, 8]);
            let (_, cache) = gau.forward(&store, &x).unwrap();
            let mut grads = store.new_grads();
            let dx = gau.backward(&store, &cache, &r, &mut grads).unwrap();

            let err = grad_check_store(&mut store, &grads, 1e-3, |s| {
                gau.forward(s, &x).unwrap().0.dot(&r)
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: params {err}");

            let mut xv = x.data().to_vec();
            let err = grad_check(&mut xv, dx.data(), 1e-3, |v| {
                let x = Tensor::from_vec(&[5, 8], v.to_vec()).unwrap();
                gau.forward(&store, &x).unwrap().0.dot(&r)
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: input {err}");
        }
    }
}
