from fastapi import FastAPI
from app.routes import experiments

app = FastAPI(title="Killed Branching Random Walk Toolkit")

# Include the experiments router
app.include_router(experiments.router, prefix="/experiments")

@app.get("/")
def root():
    return {"message": "Branching random walk toolkit is running"}
