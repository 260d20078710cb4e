#!/usr/bin/env python

from src.commands import data, evaluate, gradcheck, train
from src.commands.base import CommandApp

app = CommandApp(
    title="MDF fusion: U-Net skip features fused into a small vision-language model",
    version="0.1.0",
)

# Include routers
app.include_router(data.router)
app.include_router(train.router)
app.include_router(evaluate.router)
app.include_router(gradcheck.router)


if __name__ == "__main__":
    app()
