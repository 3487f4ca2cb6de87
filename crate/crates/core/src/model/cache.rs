use alloc::vec::Vec;

use super::ModelConfig;
use crate::adapters::PrefixAdapter;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Default)]
struct LayerKv<T> {
    keys: Vec<T>,
    values: Vec<T>,
}

/// Per-layer keys and values for incremental decoding.
///
/// Rows are laid out `[prefix rows; token rows]`. Prefix rows come from a
/// [`PrefixAdapter`] and are installed on first use, so one attention kernel
/// serves plain, cached and prefix-tuned decoding.
#[derive(Debug, Clone)]
pub struct KvCache<T: Scalar = f32> {
    d_model: usize,
    layers: Vec<LayerKv<T>>,
    prefix_len: Option<usize>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            d_model: config.d_model,
            layers: (0..config.n_layers).map(|_| LayerKv::default()).collect(),
            prefix_len: None,
            len: 0,
        }
    }

    /// Number of cached token positions (prefix rows excluded).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len.unwrap_or(0)
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.keys.clear();
            l.values.clear();
        }
        self.prefix_len = None;
        self.len = 0;
    }

    pub(crate) fn ensure_prefix(&mut self, prefix: Option<&PrefixAdapter<T>>) -> Result<()> {
        let want = prefix.map_or(0, PrefixAdapter::len);
        match self.prefix_len {
            Some(have) if have == want => Ok(()),
            Some(have) => Err(Error::AdapterMismatch(alloc::format!(
                "cache holds {have} prefix rows, adapter has {want}"
            ))),
            None => {
                if let Some(p) = prefix {
                    for (layer, rows) in self.layers.iter_mut().zip(p.layers()) {
                        layer.keys.extend_from_slice(rows.keys.data());
                        layer.values.extend_from_slice(rows.values.data());
                    }
                }
                self.prefix_len = Some(want);
                Ok(())
            }
        }
    }

    pub(crate) fn append(&mut self, layer: usize, keys: &[T], values: &[T]) {
        let l = &mut self.layers[layer];
        l.keys.extend_from_slice(keys);
        l.values.extend_from_slice(values);
    }

    pub(crate) fn layer(&self, layer: usize) -> (&[T], &[T]) {
        let l = &self.layers[layer];
        (&l.keys, &l.values)
    }

    pub(crate) fn advance(&mut self, n: usize) {
        self.len += n;
        debug_assert!(self
            .layers
            .iter()
            .all(|l| l.keys.len() == (self.prefix_len() + self.len) * self.d_model));
    }

    /// Cached rows per layer, including prefix rows.
    pub fn layer_rows(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.keys.len() / self.d_model).collect()
    }
}
