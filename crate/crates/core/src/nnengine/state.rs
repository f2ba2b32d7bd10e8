use std::collections::HashMap;

use super::arch::{LayerKind, LayerSpec};
use crate::error::{Error, Result};

/// Per-stream history buffers, one per stateful layer, keyed by layer name.
///
/// Convolutions keep their last `kernel_size - 1` input columns, causal
/// upsamplers one column, recurrent layers their hidden vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StreamState {
    buffers: HashMap<String, Vec<f32>>,
}

/// Number of history values a layer carries between frames (0 when stateless).
pub fn history_len(spec: &LayerSpec) -> usize {
    match spec.kind {
        LayerKind::CausalConv1d | LayerKind::Dsconv1d => spec.in_channels * (spec.kernel_size - 1),
        LayerKind::Interp if spec.interp_factor.num > spec.interp_factor.den => spec.in_channels,
        LayerKind::Gru => spec.out_channels,
        _ => 0,
    }
}

impl StreamState {
    /// Zero buffers sized from the layer list.
    pub fn new(specs: &[LayerSpec]) -> Self {
        let buffers = specs
            .iter()
            .filter_map(|s| {
                let n = history_len(s);
                (n > 0).then(|| (s.name.clone(), vec![0.0; n]))
            })
            .collect();
        Self { buffers }
    }

    pub fn get(&self, layer: &str) -> Result<&[f32]> {
        self.buffers
            .get(layer)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UninitializedState(layer.to_string()))
    }

    pub fn set(&mut self, layer: &str, values: Vec<f32>) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(layer)
            .ok_or_else(|| Error::UninitializedState(layer.to_string()))?;
        if slot.len() != values.len() {
            return Err(Error::shape("StreamState::set", format!("`{layer}` holds {} values, got {}", slot.len(), values.len())));
        }
        *slot = values;
        Ok(())
    }

    /// Slides a `[C, H]` column history over a `[C, T]` block: keeps the last
    /// `H` columns of `[history | x]`.
    pub fn push_columns(&mut self, layer: &str, x: &[f32], channels: usize, t: usize) -> Result<()> {
        let old = self.get(layer)?.to_vec();
        let h = old.len() / channels.max(1);
        let mut new = vec![0.0f32; old.len()];
        for c in 0..channels {
            for j in 0..h {
                // Column index into the concatenation [old (h) | x (t)].
                let idx = t + j;
                new[c * h + j] = if idx < h { old[c * h + idx] } else { x[c * t + idx - h] };
            }
        }
        self.set(layer, new)
    }

    pub fn reset(&mut self) {
        self.buffers.values_mut().for_each(|b| b.iter_mut().for_each(|v| *v = 0.0));
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_layer_is_reported() {
        let st = StreamState::default();
        assert!(matches!(st.get("pre"), Err(Error::UninitializedState(_))));
    }

    #[test]
    fn column_history_slides() {
        let spec = LayerSpec::new("c", LayerKind::Dsconv1d, 1, 1, 7, 100);
        let mut st = StreamState::new(&[spec]);
        st.push_columns("c", &[1.0, 2.0, 3.0, 4.0], 1, 4).unwrap();
        assert_eq!(st.get("c").unwrap(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        st.push_columns("c", &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0], 1, 8).unwrap();
        assert_eq!(st.get("c").unwrap(), &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
    }
}
