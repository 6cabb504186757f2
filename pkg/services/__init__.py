"""語音增強前端的服務層：數值核心、音訊特徵、模型、訓練、資料合成與儲存。"""
