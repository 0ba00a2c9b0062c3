/// Per-layer decoder keys and values for a committed prefix, plus the
/// cross-attention projections of one encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    d: usize,
    len: usize,
    src_rows: usize,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    cross: Vec<(Vec<f64>, Vec<f64>)>,
    medusa_cross: Option<(Vec<f64>, Vec<f64>)>,
}

impl KvCache {
    pub(super) fn new(
        d: usize,
        src_rows: usize,
        cross: Vec<(Vec<f64>, Vec<f64>)>,
        medusa_cross: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Self {
        let layers = cross.len();
        KvCache {
            d,
            len: 0,
            src_rows,
            self_k: vec![Vec::new(); layers],
            self_v: vec![Vec::new(); layers],
            cross,
            medusa_cross,
        }
    }

    /// Number of decoder positions held.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layers(&self) -> usize {
        self.self_k.len()
    }

    /// Drops every position at or after `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        self.len = len;
        for buf in self.self_k.iter_mut().chain(self.self_v.iter_mut()) {
            buf.truncate(len * self.d);
        }
    }

    /// Keys of `layer` for the committed positions, `len × d_model`.
    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.self_k[layer][..self.len * self.d]
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.self_v[layer][..self.len * self.d]
    }

    pub(super) fn self_rows(&self, layer: usize) -> (&[f64], &[f64]) {
        (self.keys(layer), self.values(layer))
    }

    pub(super) fn push_self(&mut self, layer: usize, k: &[f64], v: &[f64]) {
        self.self_k[layer].extend_from_slice(k);
        self.self_v[layer].extend_from_slice(v);
    }

    pub(super) fn commit(&mut self, rows: usize) {
        self.len += rows;
        debug_assert!(self.self_k.iter().all(|b| b.len() == self.len * self.d));
    }

    pub fn src_rows(&self) -> usize {
        self.src_rows
    }

    pub(super) fn cross_rows(&self, layer: usize) -> (&[f64], &[f64]) {
        let (k, v) = &self.cross[layer];
        (k, v)
    }

    pub(super) fn medusa_cross_rows(&self) -> Option<(&[f64], &[f64])> {
        self.medusa_cross
            .as_ref()
            .map(|(k, v)| (k.as_slice(), v.as_slice()))
    }
}
