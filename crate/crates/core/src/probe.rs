//! Hooks threaded through every forward pass. Quantization sites and
//! traffic accounting both observe the computation through [`Observer`].

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Encoder,
    Connector,
    Lm,
    Vit,
}

impl Scope {
    pub fn prefix(self) -> &'static str {
        match self {
            Scope::Encoder => "enc",
            Scope::Connector => "conn",
            Scope::Lm => "lm",
            Scope::Vit => "vit",
        }
    }
}

/// A named activation tensor at which static quantization may be applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteId {
    pub scope: Scope,
    pub layer: u16,
    pub name: &'static str,
}

impl SiteId {
    pub const fn new(scope: Scope, layer: u16, name: &'static str) -> Self {
        Self { scope, layer, name }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.scope.prefix(), self.layer, self.name)
    }
}

/// Element counts for one executed operator. Byte costs are derived by the
/// consumer, which knows the precision plan and memory model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpEvent<'a> {
    pub scope: Scope,
    pub layer: u16,
    pub op: &'static str,
    pub macs: u64,
    pub weight_elems: u64,
    /// Sizes of the activation tensors consumed.
    pub inputs: &'a [u64],
    /// Sizes of the activation tensors produced.
    pub outputs: &'a [u64],
    /// Persistent decode state (KV cache or rolling conv state) read and written.
    pub state_read: u64,
    pub state_write: u64,
    pub state_kind: StateKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    None,
    KvCache,
    RollingConv,
}

impl<'a> OpEvent<'a> {
    pub fn compute(scope: Scope, layer: u16, op: &'static str, macs: u64, weight_elems: u64, inputs: &'a [u64], outputs: &'a [u64]) -> Self {
        Self {
            scope,
            layer,
            op,
            macs,
            weight_elems,
            inputs,
            outputs,
            state_read: 0,
            state_write: 0,
            state_kind: StateKind::None,
        }
    }

    pub fn state(scope: Scope, layer: u16, op: &'static str, kind: StateKind, read: u64, write: u64) -> Self {
        Self {
            state_read: read,
            state_write: write,
            state_kind: kind,
            ..Self::compute(scope, layer, op, 0, 0, &[], &[])
        }
    }
}

pub trait Observer {
    /// Called with every activation produced at a quantization site. The
    /// observer may rewrite the values in place.
    fn activation(&mut self, _site: SiteId, _values: &mut [f32]) {}

    fn op(&mut self, _event: &OpEvent<'_>) {}
}

/// Observes nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoObserver;

impl Observer for NoObserver {}

/// Fans every callback out to two observers, first `.0` then `.1`.
impl<A: Observer, B: Observer> Observer for (A, B) {
    fn activation(&mut self, site: SiteId, values: &mut [f32]) {
        self.0.activation(site, values);
        self.1.activation(site, values);
    }

    fn op(&mut self, event: &OpEvent<'_>) {
        self.0.op(event);
        self.1.op(event);
    }
}

impl<T: Observer + ?Sized> Observer for &mut T {
    fn activation(&mut self, site: SiteId, values: &mut [f32]) {
        (**self).activation(site, values);
    }

    fn op(&mut self, event: &OpEvent<'_>) {
        (**self).op(event);
    }
}
