//! Flat parameter storage. Every trainable tensor lives in one `Vec<f64>`;
//! the registry records name, shape and offset in a fixed order so
//! gradients, optimizer moments and checkpoints share the same layout.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let entry = ParamEntry {
            name,
            shape: shape.to_vec(),
            offset: self.len,
        };
        self.len += entry.len();
        self.entries.push(entry);
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn slice<'a>(&self, buf: &'a [f64], id: ParamId) -> &'a [f64] {
        &buf[self.entry(id).range()]
    }

    pub fn slice_mut<'a>(&self, buf: &'a mut [f64], id: ParamId) -> &'a mut [f64] {
        &mut buf[self.entry(id).range()]
    }

    pub fn view1<'a>(&self, buf: &'a [f64], id: ParamId) -> ArrayView1<'a, f64> {
        ArrayView1::from(self.slice(buf, id))
    }

    pub fn view2<'a>(&self, buf: &'a [f64], id: ParamId) -> ArrayView2<'a, f64> {
        let e = self.entry(id);
        ArrayView2::from_shape((e.shape[0], e.shape[1]), self.slice(buf, id))
            .expect("registry shape is consistent")
    }

    pub fn view1_mut<'a>(&self, buf: &'a mut [f64], id: ParamId) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(self.slice_mut(buf, id))
    }

    pub fn view2_mut<'a>(&self, buf: &'a mut [f64], id: ParamId) -> ArrayViewMut2<'a, f64> {
        let (r, c) = {
            let e = self.entry(id);
            (e.shape[0], e.shape[1])
        };
        ArrayViewMut2::from_shape((r, c), self.slice_mut(buf, id))
            .expect("registry shape is consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_contiguous() {
        let mut reg = ParamRegistry::new();
        let a = reg.push("a", &[2, 3]);
        let b = reg.push("b", &[4]);
        assert_eq!(reg.len(), 10);
        assert_eq!(reg.entry(b).offset, 6);
        let buf: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(reg.view2(&buf, a)[[1, 0]], 3.0);
        assert_eq!(reg.view1(&buf, b).to_vec(), vec![6.0, 7.0, 8.0, 9.0]);
        assert_eq!(reg.find("b"), Some(b));
    }
}
