//! Per-origin robots.txt cache. Fetch failures and missing files allow all.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use texting_robots::Robot;
use tokio::sync::OnceCell;
use url::Url;

const ROBOTS_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Default)]
pub struct RobotsCache {
    origins: Mutex<HashMap<String, Arc<OnceCell<Option<Robot>>>>>,
}

impl RobotsCache {
    pub async fn allowed(&self, client: &reqwest::Client, url: &Url, agent: &str) -> bool {
        let origin = url.origin().ascii_serialization();
        let cell = {
            let mut map = self.origins.lock().expect("robots cache poisoned");
            Arc::clone(map.entry(origin.clone()).or_default())
        };
        let robot = cell
            .get_or_init(|| async {
                let resp = client
                    .get(format!("{origin}/robots.txt"))
                    .timeout(ROBOTS_TIMEOUT)
                    .send()
                    .await
                    .ok()?;
                if !resp.status().is_success() {
                    return None;
                }
                let body = resp.bytes().await.ok()?;
                Robot::new(agent, &body).ok()
            })
            .await;
        robot.as_ref().is_none_or(|r| r.allowed(url.as_str()))
    }
}
