// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Background threads with cooperative, interruptible shutdown.

use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

/// Shared stop flag whose waits wake up immediately on [`StopToken::stop`].
#[derive(Clone, Default)]
pub struct StopToken {
    inner: Arc<(Mutex<bool>, Condvar)>,
}

impl StopToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        let (lock, cv) = &*self.inner;
        *lock.lock().unwrap_or_else(|e| e.into_inner()) = true;
        cv.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        *self.inner.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Sleep for `dur` unless stopped first. Returns `true` if stopped.
    pub fn wait(&self, dur: Duration) -> bool {
        let (lock, cv) = &*self.inner;
        let guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let (guard, _) = cv.wait_timeout_while(guard, dur, |stopped| !*stopped).unwrap_or_else(|e| e.into_inner());
        *guard
    }
}

/// A thread that is stopped and joined on drop.
pub struct BackgroundTask {
    token: StopToken,
    handle: Option<JoinHandle<()>>,
}

impl BackgroundTask {
    pub fn spawn(name: &str, f: impl FnOnce(StopToken) + Send + 'static) -> Self {
        let token = StopToken::new();
        let t = token.clone();
        let handle =
            std::thread::Builder::new().name(name.to_owned()).spawn(move || f(t)).expect("spawn background thread");
        Self { token, handle: Some(handle) }
    }

    pub fn token(&self) -> &StopToken {
        &self.token
    }

    pub fn stop(&mut self) {
        self.token.stop();
        if let Some(h) = self.handle.take() {
            if h.thread().id() != std::thread::current().id() {
                let _ = h.join();
            }
        }
    }
}

impl Drop for BackgroundTask {
    fn drop(&mut self) {
        self.stop();
    }
}
