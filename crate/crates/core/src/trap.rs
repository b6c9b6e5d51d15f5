//! Multiplication trap for the attention kernels.
//!
//! Kernels that claim to be addition-only run inside [`kernel_scope`]. Any
//! float-by-float multiply executed through the instrumented float kernels
//! ([`note_float_mul`]) while a trap is armed and a kernel scope is open is
//! recorded as a violation against that kernel. State is thread-local, so a
//! trap only observes work done on the arming thread.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Default)]
struct TrapState {
    armed: bool,
    scopes: Vec<&'static str>,
    kernel_entries: u64,
    float_muls_outside: u64,
    violations: BTreeMap<&'static str, u64>,
}

thread_local! {
    static TRAP: RefCell<TrapState> = RefCell::new(TrapState::default());
}

/// Outcome of one armed trap window.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TrapReport {
    /// Float multiplies observed inside instrumented kernel scopes.
    pub violations: u64,
    /// Number of kernel scopes entered while armed.
    pub kernel_entries: u64,
    /// Float multiplies observed outside any kernel scope (allowed).
    pub float_muls_outside: u64,
    /// Violations broken down by kernel name.
    pub by_kernel: BTreeMap<String, u64>,
}

/// Runs `f` with the trap armed and reports every multiply seen inside an
/// instrumented kernel.
pub fn multiply_trap<R>(f: impl FnOnce() -> R) -> (R, TrapReport) {
    let previous = TRAP.with(|t| std::mem::take(&mut *t.borrow_mut()));
    TRAP.with(|t| t.borrow_mut().armed = true);
    let out = f();
    let state = TRAP.with(|t| std::mem::replace(&mut *t.borrow_mut(), previous));
    let report = TrapReport {
        violations: state.violations.values().sum(),
        kernel_entries: state.kernel_entries,
        float_muls_outside: state.float_muls_outside,
        by_kernel: state
            .violations
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    };
    (out, report)
}

/// Marks `f` as the body of a named kernel that must stay addition-only.
pub fn kernel_scope<R>(name: &'static str, f: impl FnOnce() -> R) -> R {
    TRAP.with(|t| {
        let mut t = t.borrow_mut();
        t.scopes.push(name);
        if t.armed {
            t.kernel_entries += 1;
        }
    });
    let out = f();
    TRAP.with(|t| {
        t.borrow_mut().scopes.pop();
    });
    out
}

/// Records `count` float-by-float multiplies performed by the caller.
pub fn note_float_mul(count: u64) {
    if count == 0 {
        return;
    }
    TRAP.with(|t| {
        let mut t = t.borrow_mut();
        if !t.armed {
            return;
        }
        match t.scopes.last().copied() {
            Some(kernel) => *t.violations.entry(kernel).or_insert(0) += count,
            None => t.float_muls_outside += count,
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unarmed_trap_ignores_multiplies() {
        kernel_scope("k", || note_float_mul(5));
        let (_, report) = multiply_trap(|| ());
        assert_eq!(report.violations, 0);
    }

    #[test]
    fn multiplies_inside_scope_are_violations() {
        let (_, report) = multiply_trap(|| {
            note_float_mul(2);
            kernel_scope("similarity", || note_float_mul(3));
        });
        assert_eq!(report.violations, 3);
        assert_eq!(report.float_muls_outside, 2);
        assert_eq!(report.kernel_entries, 1);
        assert_eq!(report.by_kernel["similarity"], 3);
    }
}
