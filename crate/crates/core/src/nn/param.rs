use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::ArrayD;

use super::Scalar;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// A trainable tensor. Cloning is cheap and clones share the same storage,
/// so a module and an optimizer can both hold the parameter.
///
/// The value is behind an `Rc` snapshot: registering the parameter on a tape
/// just clones the `Rc`, and the optimizer swaps in a fresh snapshot after
/// each step. Forward passes therefore never observe a half-updated value.
pub struct Param<F: Scalar> {
    inner: Rc<Inner<F>>,
}

struct Inner<F: Scalar> {
    uid: u64,
    value: RefCell<Rc<ArrayD<F>>>,
}

impl<F: Scalar> Clone for Param<F> {
    fn clone(&self) -> Self {
        Param {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        Param {
            inner: Rc::new(Inner {
                uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
                value: RefCell::new(Rc::new(value)),
            }),
        }
    }

    /// Identity of this parameter; stable for the lifetime of the process.
    pub fn uid(&self) -> u64 {
        self.inner.uid
    }

    /// Snapshot of the current value.
    pub fn value(&self) -> Rc<ArrayD<F>> {
        Rc::clone(&self.inner.value.borrow())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replace the value. Shapes must match; a parameter never changes shape.
    pub fn set(&self, value: ArrayD<F>) {
        let mut slot = self.inner.value.borrow_mut();
        assert_eq!(
            slot.shape(),
            value.shape(),
            "parameter update must preserve shape"
        );
        *slot = Rc::new(value);
    }
}
