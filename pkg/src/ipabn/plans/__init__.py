"""Built-in block plans, loaded by ipabn.services.plan_loader."""
