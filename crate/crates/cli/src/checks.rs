//! Registry of verification ids.

use serde::Serialize;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CheckInfo {
    pub id: &'static str,
    pub description: &'static str,
    #[serde(skip)]
    pub needs_growth: bool,
    #[serde(skip)]
    pub needs_oracle: bool,
    #[serde(skip)]
    pub needs_lyapunov: bool,
    #[serde(skip)]
    pub needs_simulation: bool,
    #[serde(skip)]
    pub needs_density: bool,
    #[serde(skip)]
    pub needs_approx: bool,
}

const fn info(id: &'static str, description: &'static str) -> CheckInfo {
    CheckInfo {
        id,
        description,
        needs_growth: false,
        needs_oracle: false,
        needs_lyapunov: false,
        needs_simulation: false,
        needs_density: false,
        needs_approx: false,
    }
}

const REGISTRY: [CheckInfo; 10] = [
    CheckInfo {
        needs_growth: true,
        needs_lyapunov: true,
        needs_approx: true,
        ..info(
            "approx_convergence",
            "FD densities of the truncated operators approach the untruncated density on a compact window",
        )
    },
    CheckInfo {
        needs_growth: true,
        needs_lyapunov: true,
        needs_approx: true,
        ..info(
            "approx_lyapunov",
            "truncated coefficients stay symmetric, elliptic, bounded, and keep V and W as Lyapunov functions",
        )
    },
    CheckInfo {
        needs_growth: true,
        needs_lyapunov: true,
        needs_density: true,
        ..info("envelope_domination", "FD densities stay below the kernel envelope with C̃ fitted on the largest gap")
    },
    CheckInfo {
        needs_oracle: true,
        needs_density: true,
        ..info("fd_vs_closed_form", "FD density against the closed-form Gaussian law, sup norm")
    },
    CheckInfo {
        needs_growth: true,
        needs_lyapunov: true,
        ..info("hypotheses", "growth, ellipticity and coercivity hypotheses on the shell grid")
    },
    CheckInfo {
        needs_oracle: true,
        needs_simulation: true,
        needs_density: true,
        ..info("kde_vs_closed_form", "Monte Carlo KDE against the closed-form Gaussian law, L1 norm")
    },
    CheckInfo {
        needs_simulation: true,
        needs_density: true,
        ..info("kde_vs_fd", "KDE and FD densities agree in L1 within a multiple of the KDE split-sample error")
    },
    CheckInfo {
        needs_growth: true,
        needs_lyapunov: true,
        ..info(
            "lyapunov_certificate",
            "time-dependent Lyapunov inequality on the grid with a mesh-stable rate integral",
        )
    },
    CheckInfo {
        needs_growth: true,
        needs_lyapunov: true,
        needs_simulation: true,
        ..info(
            "moment_bound_prop27",
            "Monte Carlo moments of W and V below their Lyapunov bounds at the configured sigma slack",
        )
    },
    CheckInfo {
        needs_growth: true,
        needs_lyapunov: true,
        needs_density: true,
        ..info(
            "tail_decay_thm53",
            "fitted tail rate of the FD density at least the envelope rate, up to the configured slack",
        )
    },
];

/// Sorted by id.
pub fn list_checks() -> &'static [CheckInfo] {
    &REGISTRY
}

pub fn find(id: &str) -> Option<&'static CheckInfo> {
    REGISTRY.iter().find(|c| c.id == id)
}
