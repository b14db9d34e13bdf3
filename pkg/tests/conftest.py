from hypothesis import settings

settings.register_profile("zcnas", database=None, max_examples=25, deadline=None)
settings.load_profile("zcnas")
