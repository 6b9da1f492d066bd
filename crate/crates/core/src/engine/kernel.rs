//! Named, pre-registered kernels. Driver and workers build the same registry
//! and compare its hash at registration time.

use std::collections::BTreeMap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::dstack::Record;
use crate::error::{Error, Result};

/// Arguments visible to a kernel invocation.
pub struct KernelArgs<'a> {
    pub params: &'a [f64],
    pub broadcasts: &'a [Arc<Record>],
}

impl KernelArgs<'_> {
    pub fn param(&self, index: usize) -> Result<f64> {
        self.params
            .get(index)
            .copied()
            .ok_or_else(|| Error::Config(format!("kernel parameter {index} missing")))
    }

    pub fn broadcast(&self, index: usize) -> Result<&Record> {
        self.broadcasts
            .get(index)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Config(format!("kernel broadcast {index} missing")))
    }
}

pub type RecordFn = dyn Fn(&Record, &KernelArgs) -> Result<Record> + Send + Sync;
pub type PartitionFn = dyn Fn(&[Record], &KernelArgs) -> Result<Vec<Record>> + Send + Sync;
pub type CombineFn = dyn Fn(Record, Record) -> Result<Record> + Send + Sync;

#[derive(Clone)]
pub enum KernelBody {
    /// One record in, one record out. Preserves partition record counts.
    Record(Arc<RecordFn>),
    /// Whole partition in, any number of records out.
    Partition(Arc<PartitionFn>),
    /// Associative, commutative combine with its identity element.
    Combine { zero: Record, combine: Arc<CombineFn> },
}

impl fmt::Debug for KernelBody {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelBody::Record(_) => "Record",
            KernelBody::Partition(_) => "Partition",
            KernelBody::Combine { .. } => "Combine",
        })
    }
}

#[derive(Debug, Clone)]
struct KernelEntry {
    version: u32,
    body: KernelBody,
}

#[derive(Default)]
pub struct KernelRegistry {
    entries: BTreeMap<String, KernelEntry>,
    invocations: AtomicU64,
}

impl fmt::Debug for KernelRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelRegistry")
            .field("kernels", &self.entries.keys().collect::<Vec<_>>())
            .finish()
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "kernel panicked".to_string()
    }
}

impl KernelRegistry {
    /// Registry holding the engine's builtin kernels (`identity`, `sum`).
    pub fn with_builtins() -> Self {
        let mut reg = KernelRegistry::default();
        reg.register_record("identity", 1, |r, _| Ok(r.clone()));
        reg.register_combine("sum", 1, Vec::new(), sum_records);
        reg
    }

    fn insert(&mut self, id: &str, version: u32, body: KernelBody) {
        let previous = self
            .entries
            .insert(id.to_string(), KernelEntry { version, body });
        assert!(previous.is_none(), "kernel `{id}` registered twice");
    }

    pub fn register_record<F>(&mut self, id: &str, version: u32, f: F)
    where
        F: Fn(&Record, &KernelArgs) -> Result<Record> + Send + Sync + 'static,
    {
        self.insert(id, version, KernelBody::Record(Arc::new(f)));
    }

    pub fn register_partition<F>(&mut self, id: &str, version: u32, f: F)
    where
        F: Fn(&[Record], &KernelArgs) -> Result<Vec<Record>> + Send + Sync + 'static,
    {
        self.insert(id, version, KernelBody::Partition(Arc::new(f)));
    }

    pub fn register_combine<F>(&mut self, id: &str, version: u32, zero: Record, f: F)
    where
        F: Fn(Record, Record) -> Result<Record> + Send + Sync + 'static,
    {
        self.insert(
            id,
            version,
            KernelBody::Combine {
                zero,
                combine: Arc::new(f),
            },
        );
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn body(&self, id: &str) -> Result<&KernelBody> {
        self.entries
            .get(id)
            .map(|e| &e.body)
            .ok_or_else(|| Error::Registry(format!("unknown kernel `{id}`")))
    }

    /// Hex SHA-256 over the sorted `id@version` list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (id, e) in &self.entries {
            h.update(id.as_bytes());
            h.update(b"@");
            h.update(e.version.to_le_bytes());
            h.update(b"\n");
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Total kernel invocations so far (instrumentation for laziness checks).
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    fn guarded<T>(&self, id: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(payload) => Err(Error::Kernel {
                kernel: id.to_string(),
                message: panic_message(payload),
            }),
        }
    }

    /// Run a map kernel (record-wise or partition-wise) over one partition.
    pub fn apply_map(&self, id: &str, records: &[Record], args: &KernelArgs) -> Result<Vec<Record>> {
        match self.body(id)? {
            KernelBody::Record(f) => records
                .iter()
                .map(|r| self.guarded(id, || f(r, args)))
                .collect(),
            KernelBody::Partition(f) => self.guarded(id, || f(records, args)),
            KernelBody::Combine { .. } => Err(Error::Registry(format!(
                "kernel `{id}` is a combine kernel, not a map"
            ))),
        }
    }

    /// Run a record kernel on one record.
    pub fn apply_record(&self, id: &str, record: &Record, args: &KernelArgs) -> Result<Record> {
        match self.body(id)? {
            KernelBody::Record(f) => self.guarded(id, || f(record, args)),
            _ => Err(Error::Registry(format!("kernel `{id}` is not a record kernel"))),
        }
    }

    pub fn zero(&self, id: &str) -> Result<Record> {
        match self.body(id)? {
            KernelBody::Combine { zero, .. } => Ok(zero.clone()),
            _ => Err(Error::Registry(format!("kernel `{id}` is not a combine kernel"))),
        }
    }

    pub fn combine(&self, id: &str, a: Record, b: Record) -> Result<Record> {
        match self.body(id)? {
            KernelBody::Combine { combine, .. } => self.guarded(id, || combine(a, b)),
            _ => Err(Error::Registry(format!("kernel `{id}` is not a combine kernel"))),
        }
    }
}

/// Elementwise sum of two tuples; an empty tuple is the identity.
pub fn sum_records(a: Record, b: Record) -> Result<Record> {
    if a.is_empty() {
        return Ok(b);
    }
    if b.is_empty() {
        return Ok(a);
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "sum of tuples with arity {} and {}",
            a.len(),
            b.len()
        )));
    }
    a.iter().zip(&b).map(|(x, y)| x.add(y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn hash_depends_on_ids_and_versions() {
        let a = KernelRegistry::with_builtins();
        let b = KernelRegistry::with_builtins();
        assert_eq!(a.hash(), b.hash());
        let mut c = KernelRegistry::with_builtins();
        c.register_record("extra", 1, |r, _| Ok(r.clone()));
        assert_ne!(a.hash(), c.hash());
        let mut d = KernelRegistry::with_builtins();
        d.register_record("extra", 2, |r, _| Ok(r.clone()));
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn panics_become_kernel_errors() {
        let mut reg = KernelRegistry::with_builtins();
        reg.register_record("boom", 1, |_, _| panic!("bad input"));
        let args = KernelArgs {
            params: &[],
            broadcasts: &[],
        };
        let err = reg
            .apply_map("boom", &[vec![Tensor::scalar(1.0)]], &args)
            .unwrap_err();
        assert!(matches!(err, Error::Kernel { ref message, .. } if message == "bad input"));
        assert!(matches!(
            reg.apply_map("missing", &[], &args),
            Err(Error::Registry(_))
        ));
    }

    #[test]
    fn sum_identity() {
        let x = vec![Tensor::scalar(2.0), Tensor::vector(vec![1.0, 1.0])];
        assert_eq!(sum_records(Vec::new(), x.clone()).unwrap(), x);
        let twice = sum_records(x.clone(), x).unwrap();
        assert_eq!(twice[1].data(), &[2.0, 2.0]);
    }
}
