use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use conceptrec::gateway::{Gateway, GatewayError, LlmRequest, ResponseCache, Role, Transport};

/// Echoes the payload and records how many calls overlap.
#[derive(Default)]
struct Instrumented {
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    order: Mutex<Vec<String>>,
    fail_on: Option<String>,
}

impl Transport for Instrumented {
    fn send(&self, request: &LlmRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.order.lock().unwrap().push(request.payload.clone());
        std::thread::sleep(Duration::from_millis(2));
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        if self.fail_on.as_deref() == Some(request.payload.as_str()) {
            return Err(GatewayError::Rejected {
                status: 400,
                excerpt: "bad request".into(),
            });
        }
        Ok(format!("echo {}", request.payload))
    }
}

fn requests(n: usize) -> Vec<LlmRequest> {
    (0..n)
        .map(|i| LlmRequest::new(Role::Chat, "m", format!("payload {i}")))
        .collect()
}

#[test]
fn peak_concurrency_respects_the_limit() {
    let t = Arc::new(Instrumented::default());
    let gw = Gateway::new(t.clone());
    let out = gw.call_batch(&requests(100), 8).unwrap();
    assert_eq!(out.len(), 100);
    let peak = t.peak.load(Ordering::SeqCst);
    assert!(peak <= 8, "peak {peak}");
    for (i, r) in out.iter().enumerate() {
        assert_eq!(r.body, format!("echo payload {i}"));
    }
}

#[test]
fn single_slot_issues_in_order() {
    let t = Arc::new(Instrumented::default());
    let gw = Gateway::new(t.clone());
    gw.call_batch(&requests(12), 1).unwrap();
    assert_eq!(t.peak.load(Ordering::SeqCst), 1);
    let expected: Vec<String> = (0..12).map(|i| format!("payload {i}")).collect();
    assert_eq!(*t.order.lock().unwrap(), expected);
}

#[test]
fn cached_batch_makes_no_calls_and_replays_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let t = Arc::new(Instrumented::default());
    let gw = Gateway::new(t.clone()).with_cache(ResponseCache::new(dir.path()));
    let first = gw.call_batch(&requests(10), 4).unwrap();
    assert_eq!(t.calls.load(Ordering::SeqCst), 10);

    let again = gw.call_batch(&requests(10), 4).unwrap();
    assert_eq!(t.calls.load(Ordering::SeqCst), 10);
    for (a, b) in first.iter().zip(&again) {
        assert_eq!(a.body, b.body);
        assert_eq!(b.attempts, 0);
    }
}

#[test]
fn batch_failure_keeps_finished_responses_cached() {
    let dir = tempfile::tempdir().unwrap();
    let t = Arc::new(Instrumented {
        fail_on: Some("payload 5".into()),
        ..Default::default()
    });
    let gw = Gateway::new(t.clone()).with_cache(ResponseCache::new(dir.path()));
    let err = gw.call_batch(&requests(10), 1).unwrap_err();
    assert!(
        matches!(err, GatewayError::Rejected { status: 400, .. }),
        "{err}"
    );
    let cache = ResponseCache::new(dir.path());
    for r in &requests(5) {
        assert!(cache.get(&r.cache_key()).is_some());
    }
    assert!(cache.get(&requests(6)[5].cache_key()).is_none());
}

#[test]
fn concurrent_writers_of_one_key_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::new(dir.path());
    let key = LlmRequest::new(Role::Embed, "m", "same").cache_key();
    std::thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| cache.put(&key, "identical body").unwrap());
        }
    });
    assert_eq!(cache.get(&key).as_deref(), Some("identical body"));
}
