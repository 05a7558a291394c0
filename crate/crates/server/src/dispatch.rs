//! Webhook delivery of raised alerts to maintenance offices.
//!
//! Jobs go through a bounded queue drained by a few worker tasks. When the
//! queue is full the oldest pending job is dropped (and logged) so that
//! enqueueing never waits. Each job is attempted up to `max_attempts` times
//! with exponential backoff between attempts.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::Notify;
use wlds_core::alert::{AlertTransition, Direction};
use wlds_core::geo::MaintenanceOffice;
use wlds_core::model::Causes;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchConfig {
    pub max_attempts: u32,
    /// Delay after the first failed attempt; doubles after each further one.
    pub backoff_base_ms: u64,
    pub request_timeout_ms: u64,
    pub queue_capacity: usize,
    pub workers: usize,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            backoff_base_ms: 1000,
            request_timeout_ms: 5000,
            queue_capacity: 1024,
            workers: 4,
        }
    }
}

impl DispatchConfig {
    /// Wait before attempt `n + 1` after attempt `n` (1-based) failed.
    pub fn backoff(&self, failed_attempt: u32) -> Duration {
        Duration::from_millis(
            self.backoff_base_ms
                .saturating_mul(1 << (failed_attempt - 1).min(20)),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DispatchResult {
    Delivered { attempts: u32 },
    GaveUp { attempts: u32 },
}

/// JSON body POSTed to an office webhook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertDocument {
    pub alert_id: String,
    pub node_id: String,
    pub direction: Direction,
    pub causes: Causes,
    pub garbage_level_cm: f64,
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub at_ms: u64,
}

impl AlertDocument {
    pub fn from_transition(t: &AlertTransition) -> Self {
        Self {
            alert_id: t.alert_id.clone(),
            node_id: t.node_id.to_string(),
            direction: t.direction,
            causes: t.causes,
            garbage_level_cm: t.garbage_level_cm,
            lat_deg: t.position.lat_deg(),
            lon_deg: t.position.lon_deg(),
            at_ms: t.at_ms,
        }
    }
}

/// POSTs `doc` to `url` until a 2xx answer or `max_attempts` is reached.
pub async fn deliver(
    client: &reqwest::Client,
    url: &str,
    doc: &AlertDocument,
    cfg: &DispatchConfig,
) -> DispatchResult {
    let max = cfg.max_attempts.max(1);
    for attempt in 1..=max {
        let res = client
            .post(url)
            .timeout(Duration::from_millis(cfg.request_timeout_ms))
            .json(doc)
            .send()
            .await;
        match res {
            Ok(r) if r.status().is_success() => {
                return DispatchResult::Delivered { attempts: attempt }
            }
            Ok(r) => tracing::debug!(url, attempt, status = %r.status(), "webhook refused alert"),
            Err(e) => tracing::debug!(url, attempt, error = %e, "webhook unreachable"),
        }
        if attempt < max {
            tokio::time::sleep(cfg.backoff(attempt)).await;
        }
    }
    DispatchResult::GaveUp { attempts: max }
}

pub type ResultCallback = Arc<dyn Fn(&str, &str, DispatchResult) + Send + Sync>;

struct Job {
    doc: AlertDocument,
    office: MaintenanceOffice,
}

struct Shared {
    queue: Mutex<VecDeque<Job>>,
    notify: Notify,
    cfg: DispatchConfig,
}

/// Handle to the background dispatch workers.
#[derive(Clone)]
pub struct Dispatcher {
    shared: Arc<Shared>,
}

impl Dispatcher {
    /// Spawns the workers on the current tokio runtime. `on_result` gets
    /// (alert_id, office_id, result) for every finished job.
    pub fn spawn(cfg: DispatchConfig, on_result: ResultCallback) -> Self {
        let client = reqwest::Client::new();
        let shared = Arc::new(Shared {
            queue: Mutex::new(VecDeque::new()),
            notify: Notify::new(),
            cfg,
        });
        for _ in 0..shared.cfg.workers.max(1) {
            let shared = Arc::clone(&shared);
            let client = client.clone();
            let on_result = Arc::clone(&on_result);
            tokio::spawn(async move {
                loop {
                    let job = shared
                        .queue
                        .lock()
                        .expect("dispatch queue poisoned")
                        .pop_front();
                    let Some(job) = job else {
                        shared.notify.notified().await;
                        continue;
                    };
                    let result =
                        deliver(&client, &job.office.webhook_url, &job.doc, &shared.cfg).await;
                    match result {
                        DispatchResult::Delivered { attempts } => {
                            tracing::info!(alert_id = %job.doc.alert_id, office = %job.office.office_id, attempts, "alert delivered")
                        }
                        DispatchResult::GaveUp { attempts } => {
                            tracing::warn!(alert_id = %job.doc.alert_id, office = %job.office.office_id, attempts, "alert delivery gave up")
                        }
                    }
                    on_result(&job.doc.alert_id, &job.office.office_id, result);
                }
            });
        }
        Dispatcher { shared }
    }

    /// Queues a raised alert for delivery. Never blocks.
    pub fn enqueue(&self, transition: &AlertTransition, office: MaintenanceOffice) {
        let job = Job {
            doc: AlertDocument::from_transition(transition),
            office,
        };
        {
            let mut q = self.shared.queue.lock().expect("dispatch queue poisoned");
            if q.len() >= self.shared.cfg.queue_capacity {
                if let Some(dropped) = q.pop_front() {
                    tracing::warn!(alert_id = %dropped.doc.alert_id, "dispatch queue full, dropped oldest pending alert");
                }
            }
            q.push_back(job);
        }
        self.shared.notify.notify_one();
    }

    pub fn pending(&self) -> usize {
        self.shared
            .queue
            .lock()
            .expect("dispatch queue poisoned")
            .len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    use axum::http::StatusCode;
    use axum::routing::post;
    use axum::Router;

    fn doc() -> AlertDocument {
        AlertDocument {
            alert_id: "a-1".into(),
            node_id: "n".into(),
            direction: Direction::Raised,
            causes: Causes::empty(),
            garbage_level_cm: 1.0,
            lat_deg: 0.0,
            lon_deg: 0.0,
            at_ms: 0,
        }
    }

    fn fast() -> DispatchConfig {
        DispatchConfig {
            backoff_base_ms: 5,
            request_timeout_ms: 500,
            ..DispatchConfig::default()
        }
    }

    /// Webhook answering 500 for the first `fail_first` calls, then 200.
    async fn webhook(fail_first: u32) -> (String, Arc<AtomicU32>) {
        let calls = Arc::new(AtomicU32::new(0));
        let c = Arc::clone(&calls);
        let app = Router::new().route(
            "/hook",
            post(move || {
                let c = Arc::clone(&c);
                async move {
                    if c.fetch_add(1, Ordering::SeqCst) < fail_first {
                        StatusCode::INTERNAL_SERVER_ERROR
                    } else {
                        StatusCode::OK
                    }
                }
            }),
        );
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        (format!("http://{addr}/hook"), calls)
    }

    #[test]
    fn backoff_doubles_from_one_second() {
        let c = DispatchConfig::default();
        let waits: Vec<_> = (1..5).map(|n| c.backoff(n).as_secs()).collect();
        assert_eq!(waits, vec![1, 2, 4, 8]);
    }

    #[tokio::test]
    async fn delivered_first_try() {
        let (url, calls) = webhook(0).await;
        let r = deliver(&reqwest::Client::new(), &url, &doc(), &fast()).await;
        assert_eq!(r, DispatchResult::Delivered { attempts: 1 });
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn delivered_after_two_failures() {
        let (url, _) = webhook(2).await;
        let r = deliver(&reqwest::Client::new(), &url, &doc(), &fast()).await;
        assert_eq!(r, DispatchResult::Delivered { attempts: 3 });
    }

    #[tokio::test]
    async fn gives_up_after_five_refusals() {
        let (url, calls) = webhook(u32::MAX).await;
        let r = deliver(&reqwest::Client::new(), &url, &doc(), &fast()).await;
        assert_eq!(r, DispatchResult::GaveUp { attempts: 5 });
        assert_eq!(calls.load(Ordering::SeqCst), 5);
        // Nothing listening at all.
        let r = deliver(
            &reqwest::Client::new(),
            "http://127.0.0.1:9/none",
            &doc(),
            &fast(),
        )
        .await;
        assert_eq!(r, DispatchResult::GaveUp { attempts: 5 });
    }

    #[tokio::test]
    async fn full_queue_drops_oldest() {
        let cfg = DispatchConfig {
            queue_capacity: 2,
            workers: 1,
            ..fast()
        };
        // Workers are parked behind a long-running job.
        let hang = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let hang_url = format!("http://{}/", hang.local_addr().unwrap());
        let results = Arc::new(Mutex::new(Vec::new()));
        let r = Arc::clone(&results);
        let d = Dispatcher::spawn(
            cfg,
            Arc::new(move |id: &str, _: &str, res| r.lock().unwrap().push((id.to_string(), res))),
        );
        let office = MaintenanceOffice {
            office_id: "o".into(),
            name: "o".into(),
            location: wlds_core::GeoPoint::new(0.0, 0.0).unwrap(),
            webhook_url: hang_url,
        };
        let t = |id: &str| AlertTransition {
            alert_id: id.into(),
            node_id: wlds_core::NodeId::from_bytes([1; 16]).unwrap(),
            direction: Direction::Raised,
            causes: Causes::empty(),
            garbage_level_cm: 0.0,
            at_ms: 0,
            position: wlds_core::GeoPoint::new(0.0, 0.0).unwrap(),
            dispatched_to: Some("o".into()),
            ack: None,
        };
        d.enqueue(&t("first"), office.clone());
        tokio::time::sleep(Duration::from_millis(50)).await;
        for id in ["a", "b", "c"] {
            d.enqueue(&t(id), office.clone());
        }
        assert_eq!(d.pending(), 2);
        let q: Vec<_> = d
            .shared
            .queue
            .lock()
            .unwrap()
            .iter()
            .map(|j| j.doc.alert_id.clone())
            .collect();
        assert_eq!(q, vec!["b", "c"]);
        drop(hang);
    }
}
