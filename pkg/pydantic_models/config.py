from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

DEFAULT_RECENCY_POWERS = [0.5, 1.0, 2.0]


class EndpointConfig(BaseModel):
    backend: Literal["remote", "scripted"] = "scripted"
    model_ref: str = "utilization-base"
    base_url: str = "http://localhost:8001/v1"
    # name of the environment variable holding the token, never the token itself
    api_key_env: str = "MEMCYCLE_API_KEY"
    timeout: float = Field(default=60.0, gt=0)
    max_retries: int = Field(default=2, ge=0)
    backoff_seconds: float = Field(default=0.5, ge=0)
    logprobs: bool = False
    temperature: float = 0.0
    script: Optional[list[str]] = None
    responder: Optional[str] = "synthetic"


class EmbeddingConfig(BaseModel):
    backend: Literal["remote", "deterministic-mock"] = "deterministic-mock"
    dim: int = Field(default=768, ge=1)
    seed: int = 0
    base_url: str = "http://localhost:8002/v1"
    model: str = "e5-base-v2"
    api_key_env: str = "MEMCYCLE_API_KEY"
    timeout: float = Field(default=30.0, gt=0)
    max_retries: int = Field(default=2, ge=0)
    backoff_seconds: float = Field(default=0.5, ge=0)


class MetricConfig(BaseModel):
    relevance: bool = True
    emotion: bool = True
    importance: bool = True
    recency_powers: list[float] = Field(
        default_factory=lambda: list(DEFAULT_RECENCY_POWERS)
    )
    emotion_hidden: int = Field(default=64, ge=1)
    importance_projection: int = Field(default=64, ge=1)
    emotion_scorer_path: Optional[str] = None
    importance_scorer_path: Optional[str] = None

    @model_validator(mode="after")
    def check_powers(self):
        if any(p <= 0 for p in self.recency_powers):
            raise ValueError("recency powers must be positive")
        if not self.names():
            raise ValueError("at least one metric must be enabled")
        return self

    def names(self) -> list[str]:
        names = []
        if self.relevance:
            names.append("rel")
        if self.emotion:
            names.append("emo")
        if self.importance:
            names.append("imp")
        names.extend(f"rec_p{p:g}" for p in self.recency_powers)
        return names


class RetrievalConfig(BaseModel):
    top_k: int = Field(default=10, ge=1)
    gate_hidden: int = Field(default=32, ge=1)
    init_scale: float = Field(default=0.01, ge=0)
    gate_path: Optional[str] = None


class UtilizationConfig(BaseModel):
    max_iters: int = Field(default=10, ge=1)
    word_cap: int = Field(default=8096, ge=2)
    template: Optional[str] = None


class StorageConfig(BaseModel):
    cache_capacity: int = Field(default=5, ge=1)
    max_hints: int = Field(default=20, ge=1)
    lines_per_reflection: int = Field(default=2, ge=1)
    success_template: Optional[str] = None
    failure_template: Optional[str] = None


class PolicyConfig(BaseModel):
    kind: Literal["cycle", "full", "long-term", "short-term", "fixed-weight"] = "cycle"
    short_term_window: int = Field(default=3, ge=1)
    # fixed-weight coefficients over (rel, imp, rec)
    alphas: tuple[float, float, float] = (1.0, 1.0, 1.0)


class EnvironmentConfig(BaseModel):
    tasks_path: Optional[str] = None
    corpus_path: Optional[str] = None
    synthetic_tasks: int = Field(default=30, ge=1)
    synthetic_hops: int = Field(default=2, ge=1)
    max_steps: int = Field(default=5, ge=1)
    success_threshold: float = Field(default=0.5, ge=0.0, le=1.0)


class PhaseConfig(BaseModel):
    sft_lr: float = Field(default=1e-4, gt=0)
    sft_batch: int = Field(default=16, ge=1)
    dpo_lr: float = Field(default=1e-4, gt=0)
    dpo_batch: int = Field(default=16, ge=1)
    reflection_size: int = Field(default=40, ge=1)
    gate_steps: int = Field(default=200, ge=0)


class OptimizationConfig(BaseModel):
    beta_r: float = Field(default=0.5, ge=0.0, le=1.0)
    beta_s: float = Field(default=0.5, ge=0.0, le=1.0)
    gamma: float = Field(default=0.8, gt=0.0, lt=1.0)
    alpha_r: float = Field(default=0.5, gt=0)
    gate_batch: Optional[int] = Field(default=None, ge=1)
    dpo_beta: float = Field(default=0.1, gt=0)
    sample_batch: int = Field(default=30, ge=1)
    epochs: int = Field(default=5, ge=1)
    seed: int = 0
    off_policy: PhaseConfig = Field(default_factory=PhaseConfig)
    on_policy: PhaseConfig = Field(
        default_factory=lambda: PhaseConfig(
            sft_lr=5e-4, reflection_size=15, gate_steps=1
        )
    )
    fine_tune_command: Optional[str] = None


class ScorerTrainingConfig(BaseModel):
    emotion_seed_sentence: str = "The meeting is scheduled for Tuesday afternoon."
    emotion_samples: int = Field(default=200, ge=1)
    emotion_lr: float = Field(default=0.05, gt=0)
    emotion_epochs: int = Field(default=300, ge=0)
    importance_queries: list[str] = Field(
        default_factory=lambda: [f"What do we know about topic{i}?" for i in range(40)]
    )
    chain_length: int = Field(default=6, ge=2)
    pairs_per_chain: int = Field(default=10, ge=1)
    importance_lr: float = Field(default=0.5, gt=0)
    importance_epochs: int = Field(default=300, ge=0)
    holdout_fraction: float = Field(default=0.25, ge=0.0, lt=1.0)
    few_shot_examples: int = Field(default=3, ge=0)


class RunConfig(BaseModel):
    seed: int = 0
    output_dir: str = "./runs"
    parallelism: int = Field(default=1, ge=1)
    chat: EndpointConfig = Field(default_factory=EndpointConfig)
    expert: EndpointConfig = Field(
        default_factory=lambda: EndpointConfig(model_ref="utilization-expert")
    )
    embedding: EmbeddingConfig = Field(default_factory=EmbeddingConfig)
    metrics: MetricConfig = Field(default_factory=MetricConfig)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    utilization: UtilizationConfig = Field(default_factory=UtilizationConfig)
    storage: StorageConfig = Field(default_factory=StorageConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    environment: EnvironmentConfig = Field(default_factory=EnvironmentConfig)
    optimization: OptimizationConfig = Field(default_factory=OptimizationConfig)
    scorers: ScorerTrainingConfig = Field(default_factory=ScorerTrainingConfig)
    bundle_path: Optional[str] = None
