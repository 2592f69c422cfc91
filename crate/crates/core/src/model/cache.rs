//! Per-layer key/value storage with an append/release lifecycle and exact
//! byte accounting.
//!
//! Buffers hold `f64` compute values; accounting is decoupled and uses a
//! configurable `bytes_per_element` (2 for half precision, 4 for single) so
//! the memory model can be validated against half-precision deployments while
//! the toy computes in full precision. The accounted size is always
//!
//! ```text
//! bytes = 2 * depth * width * cached_tokens * bytes_per_element * batch
//! ```

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct LayerKv {
    /// One flat `(tokens * width)` buffer per batch element.
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct KVCacheState {
    depth: usize,
    width: usize,
    batch: usize,
    bytes_per_element: usize,
    cached_tokens: usize,
    released: bool,
    layers: Vec<LayerKv>,
}

impl KVCacheState {
    pub fn new(depth: usize, width: usize, batch: usize, bytes_per_element: usize) -> Self {
        let layers = (0..depth)
            .map(|_| LayerKv {
                k: vec![Vec::new(); batch],
                v: vec![Vec::new(); batch],
            })
            .collect();
        Self {
            depth,
            width,
            batch,
            bytes_per_element,
            cached_tokens: 0,
            released: false,
            layers,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn bytes_per_element(&self) -> usize {
        self.bytes_per_element
    }

    pub fn cached_tokens(&self) -> usize {
        self.cached_tokens
    }

    pub fn is_released(&self) -> bool {
        self.released
    }

    /// Accounted bytes derived from the buffers actually held.
    pub fn measured_bytes(&self) -> u64 {
        let elements: usize = self
            .layers
            .iter()
            .map(|l| {
                l.k.iter().map(Vec::len).sum::<usize>() + l.v.iter().map(Vec::len).sum::<usize>()
            })
            .sum();
        elements as u64 * self.bytes_per_element as u64
    }

    /// The closed-form size the measured bytes must always equal.
    pub fn formula_bytes(&self) -> u64 {
        2 * self.depth as u64
            * self.width as u64
            * self.cached_tokens as u64
            * self.bytes_per_element as u64
            * self.batch as u64
    }

    pub(crate) fn append_layer(&mut self, layer: usize, b: usize, k: &[f64], v: &[f64]) -> Result<()> {
        if self.released {
            return Err(Error::Contract("append to a released cache".into()));
        }
        debug_assert_eq!(k.len() % self.width, 0);
        debug_assert_eq!(k.len(), v.len());
        let slot = &mut self.layers[layer];
        slot.k[b].extend_from_slice(k);
        slot.v[b].extend_from_slice(v);
        Ok(())
    }

    /// Bumps the token count after all layers of a block were appended.
    pub(crate) fn advance(&mut self, tokens: usize) {
        self.cached_tokens += tokens;
        debug_assert!(self.layers.iter().all(|l| {
            l.k.iter()
                .chain(l.v.iter())
                .all(|buf| buf.len() == self.cached_tokens * self.width)
        }));
    }

    pub(crate) fn layer_kv(&self, layer: usize, b: usize) -> (&[f64], &[f64]) {
        (&self.layers[layer].k[b], &self.layers[layer].v[b])
    }

    /// Drops all buffers, returning exactly the accounted byte count.
    /// Releasing twice returns 0.
    pub fn release(&mut self) -> u64 {
        if self.released {
            return 0;
        }
        let freed = self.measured_bytes();
        debug_assert_eq!(freed, self.formula_bytes());
        for layer in &mut self.layers {
            for buf in layer.k.iter_mut().chain(layer.v.iter_mut()) {
                *buf = Vec::new();
            }
        }
        self.cached_tokens = 0;
        self.released = true;
        freed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cond_only_cache_frees_128_bytes() {
        // depth=2, width=8, one token, fp32 accounting, batch=1
        let mut c = KVCacheState::new(2, 8, 1, 4);
        let block = vec![0.0; 8];
        for l in 0..2 {
            c.append_layer(l, 0, &block, &block).unwrap();
        }
        c.advance(1);
        assert_eq!(c.measured_bytes(), 128);
        assert_eq!(c.formula_bytes(), 128);
        assert_eq!(c.release(), 128);
        assert_eq!(c.release(), 0);
        assert_eq!(c.measured_bytes(), 0);
    }

    #[test]
    fn empty_cache_frees_zero() {
        let mut c = KVCacheState::new(3, 4, 1, 2);
        assert_eq!(c.release(), 0);
    }

    #[test]
    fn accounting_matches_formula_for_append_sequences() {
        let mut c = KVCacheState::new(3, 4, 2, 2);
        let mut expect_tokens = 0usize;
        for block in [1usize, 4, 9, 2] {
            for l in 0..3 {
                for b in 0..2 {
                    c.append_layer(l, b, &vec![0.0; block * 4], &vec![0.0; block * 4])
                        .unwrap();
                }
            }
            c.advance(block);
            expect_tokens += block;
            assert_eq!(c.cached_tokens(), expect_tokens);
            assert_eq!(c.measured_bytes(), c.formula_bytes());
            assert_eq!(
                c.formula_bytes(),
                (2 * 3 * 4 * expect_tokens * 2 * 2) as u64
            );
        }
    }

    #[test]
    fn append_after_release_is_rejected() {
        let mut c = KVCacheState::new(1, 2, 1, 4);
        c.release();
        assert!(c.append_layer(0, 0, &[0.0, 0.0], &[0.0, 0.0]).is_err());
    }
}
