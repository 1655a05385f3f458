//! One-call assembly of the full in-process stack: broker, storage-node
//! engine, and host engine wired over channel transports. Tests, benches,
//! and the loopback deployment all build through here.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::SeedableRng;

use sealstor_blockdev::SimDevice;
use sealstor_core::crypto::{CipherSuite, FreshnessKey, TenantStorageKey};
use sealstor_core::DeviceGeometry;
use sealstor_kbs::{KbsClient, KbsService, KeyBroker};
use sealstor_transport::{connect_in_proc, Credentials};

use crate::config::StackConfig;
use crate::local::{Backend, LocalConfig, LocalEngine, RemoteBackend};
use crate::nv::NvStore;
use crate::pool::CounterPool;
use crate::remote::{RemoteConfig, RemoteEngine};
use crate::service::RemoteService;
use crate::window::ReplayWindow;

pub struct StackOptions {
    pub geometry: DeviceGeometry,
    pub suite: CipherSuite,
    pub local: LocalConfig,
    pub remote: RemoteConfig,
    pub counter_space: u64,
    pub tenant_key: [u8; 32],
    pub freshness_key: [u8; 32],
    pub device_path: PathBuf,
    pub nv_path: Option<PathBuf>,
    pub device_delay: Option<Duration>,
    pub seed: u64,
    /// Worker threads serving the remote engine's link.
    pub service_workers: usize,
}

impl StackOptions {
    pub fn small(dir: &std::path::Path, sectors: u64) -> Self {
        Self {
            geometry: DeviceGeometry::with_defaults(sectors).expect("geometry"),
            suite: CipherSuite::default(),
            local: LocalConfig {
                watermark: 64,
                lease_units: 1024,
                ..LocalConfig::default()
            },
            remote: RemoteConfig::default(),
            counter_space: sealstor_kbs::COUNTER_SPACE_END,
            tenant_key: [7; 32],
            freshness_key: [8; 32],
            device_path: dir.join("device.img"),
            nv_path: None,
            device_delay: None,
            seed: 1,
            service_workers: 4,
        }
    }
}

/// A fully wired loopback deployment.
pub struct Stack {
    pub device: Arc<SimDevice>,
    pub nv: Arc<NvStore>,
    pub remote: Arc<RemoteEngine>,
    pub broker: Arc<KeyBroker>,
    pub local: LocalEngine,
}

impl Stack {
    pub fn build(opts: StackOptions) -> Stack {
        let device = Arc::new(
            if opts.device_path.exists() {
                SimDevice::open(&opts.device_path, opts.geometry).expect("open device")
            } else {
                SimDevice::create(&opts.device_path, opts.geometry).expect("create device")
            },
        );
        device.set_sector_delay(opts.device_delay);
        Self::attach(opts, device)
    }

    /// Build over an existing device (e.g. after a crash reopen).
    pub fn attach(opts: StackOptions, device: Arc<SimDevice>) -> Stack {
        let mut cfg = opts.remote.clone();
        cfg.journal_capacity = cfg.journal_capacity.max(1);
        let nv = Arc::new(match &opts.nv_path {
            Some(path) => NvStore::load(path, cfg.journal_capacity, opts.geometry.data_set_size())
                .expect("nv load"),
            None => NvStore::new(cfg.journal_capacity, opts.geometry.data_set_size()),
        });
        Self::attach_with_nv(opts, device, nv)
    }

    pub fn attach_with_nv(opts: StackOptions, device: Arc<SimDevice>, nv: Arc<NvStore>) -> Stack {
        let suite = opts.suite;
        let device_id = opts.local.device_id.clone();

        let remote = RemoteEngine::start(
            Arc::clone(&device),
            suite,
            opts.remote.clone(),
            Arc::clone(&nv),
            &device_id,
            FreshnessKey::from_bytes(opts.freshness_key),
        )
        .expect("remote engine start");

        let broker = Arc::new(KeyBroker::with_counter_space(suite, opts.counter_space));
        broker
            .register_tenant("tenant-0", TenantStorageKey::from_bytes(opts.tenant_key))
            .expect("tenant registration");
        broker.register_device(&device_id).expect("device registration");

        let kbs_creds = Credentials::symmetric(b"kbs-attest", [0x21; 32]);
        let mut rng_a = StdRng::seed_from_u64(opts.seed.wrapping_mul(3).wrapping_add(1));
        let mut rng_b = StdRng::seed_from_u64(opts.seed.wrapping_mul(3).wrapping_add(2));
        let kbs_rpc = connect_in_proc(
            &kbs_creds,
            &kbs_creds,
            &suite,
            1,
            Arc::new(KbsService::new(Arc::clone(&broker))),
            2,
            &mut rng_a,
            &mut rng_b,
        )
        .expect("kbs session");
        let kbs_client = Arc::new(KbsClient::new(kbs_rpc));
        let device_key = kbs_client
            .provision_key("tenant-0", &device_id)
            .expect("device key");

        let engine_creds = Credentials::symmetric(b"engine-attest", [0x22; 32]);
        let mut rng_c = StdRng::seed_from_u64(opts.seed.wrapping_mul(3).wrapping_add(3));
        let mut rng_d = StdRng::seed_from_u64(opts.seed.wrapping_mul(3).wrapping_add(4));
        let rpc = connect_in_proc(
            &engine_creds,
            &engine_creds,
            &suite,
            2,
            Arc::new(RemoteService::new(Arc::clone(&remote))),
            opts.service_workers,
            &mut rng_c,
            &mut rng_d,
        )
        .expect("engine session");
        let session = rpc.session().clone();
        let backend = Backend::Remote(RemoteBackend {
            rpc,
            recv_window: parking_lot::Mutex::new(ReplayWindow::new(
                session.recv_start,
                opts.remote.window_size,
            )),
            j_send: std::sync::atomic::AtomicU64::new(session.send_start),
        });

        let local = LocalEngine::new(
            suite,
            opts.geometry,
            opts.local.clone(),
            device_key,
            Some(kbs_client),
            backend,
        );
        Stack {
            device,
            nv,
            remote,
            broker,
            local,
        }
    }

    /// Integrity-only deployment: the host engine seals straight onto a
    /// device, no storage-node engine involved.
    pub fn build_direct(opts: StackOptions) -> (Arc<SimDevice>, LocalEngine) {
        let device = Arc::new(
            if opts.device_path.exists() {
                SimDevice::open(&opts.device_path, opts.geometry).expect("open device")
            } else {
                SimDevice::create(&opts.device_path, opts.geometry).expect("create device")
            },
        );
        device.set_sector_delay(opts.device_delay);
        let suite = opts.suite;
        let broker = Arc::new(KeyBroker::with_counter_space(suite, opts.counter_space));
        broker
            .register_tenant("tenant-0", TenantStorageKey::from_bytes(opts.tenant_key))
            .expect("tenant registration");
        broker
            .register_device(&opts.local.device_id)
            .expect("device registration");
        let device_key = broker
            .provision_device_key("tenant-0", &opts.local.device_id)
            .expect("device key");
        let mut local = LocalEngine::new(
            suite,
            opts.geometry,
            opts.local.clone(),
            device_key,
            None,
            Backend::Direct(Arc::clone(&device)),
        );
        // Without a broker link the pool is preloaded with the full space.
        let _ = &mut local;
        local.pool().install(vec![sealstor_kbs::LeaseRange {
            start: 0,
            end: opts.counter_space,
        }]);
        (device, local)
    }

    /// Options derived from a parsed TOML config.
    pub fn options_from_config(
        cfg: &StackConfig,
        fallback_dir: &std::path::Path,
    ) -> Result<StackOptions, crate::config::ConfigError> {
        let geometry = cfg.device.geometry()?;
        let suite = cfg.crypto.suite()?;
        let device_path = cfg
            .device
            .path
            .clone()
            .unwrap_or_else(|| fallback_dir.join("device.img"));
        Ok(StackOptions {
            geometry,
            suite,
            local: cfg.local.to_config(),
            remote: cfg.remote.to_config(),
            counter_space: cfg
                .kbs
                .counter_space
                .unwrap_or(sealstor_kbs::COUNTER_SPACE_END),
            tenant_key: [7; 32],
            freshness_key: [8; 32],
            device_path,
            nv_path: cfg.remote.nv_path.clone(),
            device_delay: (cfg.device.delay_us > 0)
                .then(|| Duration::from_micros(cfg.device.delay_us)),
            seed: 1,
            service_workers: 4,
        })
    }
}

/// Convenience for tests that need a bare counter pool primed like a fresh
/// lease.
pub fn primed_pool(units: u64) -> CounterPool {
    let pool = CounterPool::new(0, 0);
    pool.install(vec![sealstor_kbs::LeaseRange {
        start: 0,
        end: units,
    }]);
    pool
}
