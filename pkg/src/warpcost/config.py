"""Flat key=value run configuration shared by the CLI subcommands.

Precedence is defaults < config file < command-line flags. Unknown keys
in a config file are a hard error so typos cannot silently fall back to
defaults.
"""

from dataclasses import dataclass, fields

from .ais import AisConfig
from .epll_flow import FlowConfig
from .errors import ConfigError
from .gmm import GmmConfig
from .patches import DEFAULT_TRAIN_FRACTION


@dataclass
class RunConfig:
    # dataset
    patch_size: int = 8
    stride: int = 8
    train_fraction: float = DEFAULT_TRAIN_FRACTION
    # EM
    em_minibatch: int = 10000
    em_epochs: int = 20
    em_cov_floor: float = 1e-6
    # AIS (final run and the cheaper grid-search runs)
    ais_chains: int = 512
    ais_temps: int = 1000
    ais_leapfrog: int = 5
    search_chains: int = 128
    search_temps: int = 250
    # flow
    lambda_reg: float = 0.05
    beta0: float = 100.0
    beta_growth: float = 1.6
    beta_cap: float = 1e6
    iterations_per_level: int = 20
    warm_start_iterations: int = 5
    pyramid_scale: float = 0.5
    min_dim: int = 16
    irls_iterations: int = 3
    charbonnier_eps: float = 1e-3
    flow_stride: int = 1
    cg_rtol: float = 1e-8
    cg_max_iter: int = 2000
    # misc
    seed: int = 0
    threads: int = 0

    def apply(self, **overrides):
        """Set any non-None overrides (CLI flags win over file values)."""
        names = {f.name for f in fields(self)}
        for key, value in overrides.items():
            if key not in names:
                raise ConfigError(f"unknown config key: {key}")
            if value is not None:
                setattr(self, key, value)
        return self

    def flow_config(self):
        return FlowConfig(
            lambda_reg=self.lambda_reg, beta0=self.beta0,
            beta_growth=self.beta_growth, beta_cap=self.beta_cap,
            iterations_per_level=self.iterations_per_level,
            warm_start_iterations=self.warm_start_iterations,
            pyramid_scale=self.pyramid_scale, min_dim=self.min_dim,
            irls_iterations=self.irls_iterations,
            charbonnier_eps=self.charbonnier_eps, stride=self.flow_stride,
            cg_rtol=self.cg_rtol, cg_max_iter=self.cg_max_iter)

    def gmm_config(self, seed=None):
        return GmmConfig(minibatch_size=self.em_minibatch,
                         epochs=self.em_epochs,
                         seed=self.seed if seed is None else seed,
                         cov_floor=self.em_cov_floor)

    def ais_config(self, seed=None):
        seed = self.seed if seed is None else seed
        return AisConfig(n_chains=self.ais_chains, n_temps=self.ais_temps,
                         hmc_leapfrog_steps=self.ais_leapfrog, seed=seed + 1)

    def search_ais_config(self, seed=None):
        seed = self.seed if seed is None else seed
        return AisConfig(n_chains=self.search_chains,
                         n_temps=self.search_temps,
                         hmc_leapfrog_steps=self.ais_leapfrog, seed=seed)


def load_config(path):
    """Parse a flat key=value file; # comments and blank lines allowed."""
    cfg = RunConfig()
    names = {f.name: f.type for f in fields(RunConfig)}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, "
                                  f"got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in names:
                raise ConfigError(f"{path}:{lineno}: unknown config key: {key}")
            caster = int if names[key] in (int, "int") else float
            try:
                setattr(cfg, key, caster(value))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: "
                                  f"{value!r}") from exc
    return cfg
