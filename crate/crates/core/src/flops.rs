//! Instrumented multiply-accumulate counter.
//!
//! Matmul, linear and convolution primitives add their MAC count to a
//! thread-local tally under the currently active [`Category`]. Counting is off
//! unless running inside [`count`].

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// Attention projections and the two attention matmuls.
    Attention,
    /// MambaVision mixer projections and convolutions.
    Mixer,
    Mlp,
    /// Stem, Fused-MBConv, SE, downsampler and global token generator.
    Conv,
    Head,
    Other,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Attention,
        Category::Mixer,
        Category::Mlp,
        Category::Conv,
        Category::Head,
        Category::Other,
    ];
}

thread_local! {
    static CURRENT: Cell<Category> = const { Cell::new(Category::Other) };
    static TALLY: RefCell<Option<BTreeMap<Category, u64>>> = const { RefCell::new(None) };
}

/// Restores the previous category on drop.
pub struct ScopeGuard {
    prev: Category,
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        CURRENT.with(|c| c.set(self.prev));
    }
}

/// Attributes MACs recorded until the guard drops to `category`.
pub fn scope(category: Category) -> ScopeGuard {
    let prev = CURRENT.with(|c| c.replace(category));
    ScopeGuard { prev }
}

pub(crate) fn add(macs: usize) {
    TALLY.with(|t| {
        if let Some(map) = t.borrow_mut().as_mut() {
            *map.entry(CURRENT.with(Cell::get)).or_insert(0) += macs as u64;
        }
    });
}

/// Per-category MAC counts from one instrumented run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Counts(pub BTreeMap<Category, u64>);

impl Counts {
    pub fn get(&self, c: Category) -> u64 {
        self.0.get(&c).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }
}

/// Runs `f` with counting enabled and returns its result with the tally.
/// Nested calls are not supported; the inner call takes over the tally.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, Counts) {
    let prev = TALLY.with(|t| t.borrow_mut().replace(BTreeMap::new()));
    let r = f();
    let map = TALLY.with(|t| {
        let mut t = t.borrow_mut();
        let map = t.take().unwrap_or_default();
        *t = prev;
        map
    });
    (r, Counts(map))
}
