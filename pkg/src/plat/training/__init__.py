"""Training phases: CoT baseline, latent reconstruction, decoupled GRPO."""
